use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use coop_ebm::datasets::{Dataset, DatasetKind, GLYPH_SIDE};
use coop_ebm::io::{
    checkpoint, config_from_manifest, fmt_f64, parse_config, write_image_grid, write_metric_rows, write_table,
    GridLayout, RunConfig, RunDir, BUILD_ID,
};
use coop_ebm::learning::{continue_training, interleaved_sweep, train_loop, TrainMode, TrainState};
use coop_ebm::metrics::{
    cross_modal_coherence, fid_raw, fid_surrogate, latent_interpolation, latent_probe_accuracy, median_bandwidth,
    mmd_rbf, oracle_suite, unconditional_coherence, ToyClassifier,
};
use coop_ebm::samplers::{sample_conditional, sample_from_noise, sample_unconditional};
use coop_ebm::{Error, LatentState, ModelTriple, MultimodalBatch, Result, RngStream, Tensor};

#[derive(Parser)]
#[command(name = "coop-ebm", version = BUILD_ID, about = "Cooperative multimodal energy-based models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// TOML run config. Missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `train.total_steps`.
    #[arg(long)]
    steps: Option<u64>,
}

#[derive(Args, Clone)]
struct Source {
    /// Directory of a finished `train` run.
    #[arg(long)]
    run: PathBuf,
    /// Checkpoint step to load; defaults to the latest.
    #[arg(long)]
    step: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train from scratch, or resume from a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Unconditional samples, or cross-modal samples given test items.
    Sample {
        #[command(flatten)]
        source: Source,
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 64)]
        n: usize,
        /// Comma-separated observed modality indices.
        #[arg(long)]
        observed: Option<String>,
    },
    /// Subset-posterior refinement on test items, before and after.
    Refine {
        #[command(flatten)]
        source: Source,
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 500)]
        n: usize,
        #[arg(long)]
        observed: String,
    },
    /// Coherence, FID surrogate, MMD and latent probe.
    Eval {
        #[command(flatten)]
        source: Source,
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1000)]
        n: usize,
    },
    /// Decodes a straight latent path between two test items.
    Interpolate {
        #[command(flatten)]
        source: Source,
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 8)]
        points: usize,
        #[arg(long, default_value_t = 0)]
        from: usize,
        #[arg(long, default_value_t = 1)]
        to: usize,
    },
    /// Trains one arm per (mode, k_x) pair in lockstep and compares them.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "cooperative")]
        modes: String,
        #[arg(long, default_value = "10,30,60")]
        k: String,
        #[arg(long, default_value_t = 1000)]
        n: usize,
    },
    /// Runs the analytic oracle checks.
    Oracle {
        #[command(flatten)]
        common: Common,
    },
}

fn load_config(common: &Common, base: Option<RunConfig>) -> Result<RunConfig> {
    let mut cfg = match (&common.config, base) {
        (Some(path), _) => parse_config(path)?,
        (None, Some(cfg)) => cfg,
        (None, None) => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(steps) = common.steps {
        cfg.train.total_steps = steps;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::Invalid(msg.into())
}

fn parse_list<T: std::str::FromStr>(what: &str, s: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|v| v.trim().parse().map_err(|_| invalid(format!("{what}: cannot parse {v:?}"))))
        .collect()
}

fn observed_mask(spec: &str, m: usize) -> Result<Vec<bool>> {
    let mut mask = vec![false; m];
    for i in parse_list::<usize>("--observed", spec)? {
        *mask.get_mut(i).ok_or_else(|| invalid(format!("--observed: no modality {i}")))? = true;
    }
    Ok(mask)
}

struct Loaded {
    cfg: RunConfig,
    dataset: Dataset,
    models: ModelTriple,
    step: u64,
}

fn latest_checkpoint(dir: &Path) -> Result<u64> {
    let entries = fs::read_dir(dir).map_err(|source| Error::Io { path: dir.into(), source })?;
    entries
        .filter_map(|e| e.ok()?.file_name().into_string().ok())
        .filter_map(|n| n.strip_prefix("checkpoint_")?.strip_suffix(".cmeb")?.parse().ok())
        .max()
        .ok_or_else(|| Error::Checkpoint(format!("{}: no checkpoints", dir.display())))
}

fn load_run(source: &Source, common: &Common) -> Result<Loaded> {
    let base = config_from_manifest(&source.run.join("manifest.toml"))?;
    let cfg = load_config(common, Some(base))?;
    let step = match source.step {
        Some(s) => s,
        None => latest_checkpoint(&source.run)?,
    };
    let path = source.run.join(format!("checkpoint_{step:08}.cmeb"));
    let (state, _) = checkpoint::load(&path, Some(&cfg.resolved_model()?))?;
    Ok(Loaded {
        dataset: cfg.dataset.build()?,
        cfg,
        models: state.models,
        step,
    })
}

fn out_dir(common: &Common, source: Option<&Source>, command: &str, cfg: &RunConfig) -> Result<RunDir> {
    let path = match (&common.out, source) {
        (Some(p), _) => p.clone(),
        (None, Some(s)) => s.run.join(command),
        (None, None) => PathBuf::from(&cfg.output.dir),
    };
    RunDir::acquire(&path)
}

/// One CSV per modality, plus an image grid when items are glyphs.
fn write_samples(dir: &RunDir, prefix: &str, x: &MultimodalBatch, cfg: &RunConfig, cols: usize) -> Result<()> {
    for (i, m) in x.modalities.iter().enumerate() {
        let header: Vec<String> = (0..m.row_len()).map(|j| format!("x{j}")).collect();
        let header: Vec<&str> = header.iter().map(String::as_str).collect();
        let rows: Vec<Vec<String>> = (0..m.rows()).map(|r| m.row(r).iter().map(|&v| fmt_f64(v)).collect()).collect();
        write_table(&dir.path().join(format!("{prefix}_modality{i}.csv")), &header, &rows)?;
        if cfg.dataset.kind == DatasetKind::Glyph {
            let tiles: Vec<Vec<f64>> = (0..m.rows()).map(|r| m.row(r).to_vec()).collect();
            let cols = cols.clamp(1, tiles.len().max(1));
            let layout = GridLayout {
                tile_w: GLYPH_SIDE,
                tile_h: GLYPH_SIDE,
                rows: tiles.len().div_ceil(cols),
                cols,
                pad: 1,
            };
            write_image_grid(&dir.path().join(format!("{prefix}_modality{i}.pgm")), &tiles, layout)?;
        }
    }
    Ok(())
}

fn test_items(dataset: &Dataset, n: usize) -> Result<(MultimodalBatch, Option<Vec<usize>>)> {
    if dataset.test.is_empty() {
        return Err(invalid("the test split is empty"));
    }
    let idx: Vec<usize> = (0..n.min(dataset.test.len())).collect();
    Ok((dataset.test.batch(&idx), dataset.test.labels_at(&idx)))
}

/// Samples from the EBM the way its training mode draws them.
fn model_samples(cfg: &RunConfig, models: &ModelTriple, n: usize, rng: &mut RngStream) -> Result<MultimodalBatch> {
    match cfg.train.mode {
        TrainMode::MleEbm => sample_from_noise(models, n, &cfg.sampler_x, rng),
        _ => sample_unconditional(models, n, &cfg.sampler_x, rng),
    }
}

/// Rows of all modalities side by side.
fn joint_rows(x: &MultimodalBatch) -> Result<Tensor> {
    let parts: Vec<&Tensor> = x.modalities.iter().collect();
    Tensor::concat(&parts, 1)
}

fn train(common: &Common, resume: Option<&Path>) -> Result<Vec<(String, String)>> {
    let cfg = load_config(common, None)?;
    let dataset = cfg.dataset.build()?;
    let dir = out_dir(common, None, "train", &cfg)?;
    let out = match resume {
        Some(path) => {
            let (state, _): (TrainState, _) = checkpoint::load(path, Some(&cfg.resolved_model()?))?;
            continue_training(&cfg, &dataset, state, Some(&dir))?
        }
        None => train_loop(&cfg, &dataset, Some(&dir))?,
    };
    Ok(vec![
        ("final_step".into(), out.state.step.to_string()),
        ("aborted_steps".into(), out.state.aborted.to_string()),
        ("out".into(), dir.path().display().to_string()),
    ])
}

fn sample(source: &Source, common: &Common, n: usize, observed: Option<&str>) -> Result<Vec<(String, String)>> {
    let run = load_run(source, common)?;
    let dir = out_dir(common, Some(source), "sample", &run.cfg)?;
    let mut rng = RngStream::new(run.cfg.seed, "cli/sample");
    let x = match observed {
        Some(spec) => {
            let mask = observed_mask(spec, run.cfg.dataset.num_modalities)?;
            let (x, _) = test_items(&run.dataset, n)?;
            write_samples(&dir, "observed", &x, &run.cfg, 8)?;
            sample_conditional(&run.models, &x, &mask, &run.cfg.sampler_z, &mut rng)?.0
        }
        None => model_samples(&run.cfg, &run.models, n, &mut rng)?,
    };
    write_samples(&dir, "samples", &x, &run.cfg, 8)?;
    dir.write_manifest("sample", &run.cfg, &[
        ("checkpoint_step".into(), run.step.to_string()),
        ("samples".into(), x.batch_size().to_string()),
    ])?;
    Ok(vec![("out".into(), dir.path().display().to_string())])
}

fn classifier_for(run: &Loaded) -> Result<Option<ToyClassifier>> {
    let Some(classes) = run.cfg.dataset.num_classes() else {
        return Ok(None);
    };
    let clf = ToyClassifier::train(&run.dataset.train, &run.dataset.test, classes, run.cfg.seed)?;
    Ok(Some(clf))
}

fn refine(source: &Source, common: &Common, n: usize, observed: &str) -> Result<Vec<(String, String)>> {
    let run = load_run(source, common)?;
    let mask = observed_mask(observed, run.cfg.dataset.num_modalities)?;
    let dir = out_dir(common, Some(source), "refine", &run.cfg)?;
    let (x, labels) = test_items(&run.dataset, n)?;
    let clf = classifier_for(&run)?.filter(|c| c.require().is_ok());
    let mut metrics = Vec::new();
    let m = run.cfg.dataset.num_modalities;
    for (tag, steps) in [("initial", 0), ("refined", run.cfg.sampler_z.steps)] {
        let cfg_z = run.cfg.sampler_z.clone().with_steps(steps);
        let mut rng = RngStream::new(run.cfg.seed, "cli/refine");
        let (gen, record) = sample_conditional(&run.models, &x, &mask, &cfg_z, &mut rng)?;
        let profile = record.mean_profile();
        metrics.push((format!("{tag}_mean_log_posterior"), *profile.last().unwrap_or(&f64::NAN)));
        if let (Some(clf), Some(y)) = (&clf, &labels) {
            let c = coop_ebm::metrics::conditional_coherence(&gen, y, &vec![true; m], clf)?;
            metrics.push((format!("{tag}_conditional_coherence"), c));
        }
        write_samples(&dir, tag, &gen, &run.cfg, 8)?;
    }
    write_metric_rows(&dir.path().join("refine.csv"), run.step, &metrics)?;
    dir.write_manifest("refine", &run.cfg, &[("observed".into(), observed.into())])?;
    Ok(metrics.into_iter().map(|(k, v)| (k, fmt_f64(v))).collect())
}

fn eval(source: &Source, common: &Common, n: usize) -> Result<Vec<(String, String)>> {
    let run = load_run(source, common)?;
    let dir = out_dir(common, Some(source), "eval", &run.cfg)?;
    let mut rng = RngStream::new(run.cfg.seed, "cli/eval");
    let (real, labels) = test_items(&run.dataset, n)?;
    let generated = model_samples(&run.cfg, &run.models, real.batch_size(), &mut rng)?;
    let mut metrics = vec![
        ("mmd_median_bandwidth".to_string(), mmd_rbf(&joint_rows(&generated)?, &joint_rows(&real)?, None)?),
        ("fid_raw".to_string(), fid_raw(&real, &generated)?),
    ];
    if let (Some(clf), Some(y)) = (classifier_for(&run)?, labels) {
        metrics.push(("classifier_min_accuracy".into(), clf.min_accuracy()));
        if clf.require().is_ok() {
            metrics.push(("unconditional_coherence".into(), unconditional_coherence(&generated, &clf)?));
            for k in 1..=run.cfg.dataset.num_modalities {
                let c = cross_modal_coherence(&run.models, &real, &y, k, &run.cfg.sampler_z, &clf, &mut rng)?;
                metrics.push((format!("conditional_coherence_observed_{k}"), c));
            }
            metrics.push(("fid_surrogate".into(), fid_surrogate(&real, &generated, &clf)?));
        }
        let classes = run.cfg.dataset.num_classes().unwrap_or(0);
        let probe = latent_probe_accuracy(&run.models.inference, &run.dataset.train, &run.dataset.test, classes, run.cfg.seed)?;
        metrics.push(("latent_probe_accuracy".into(), probe));
    }
    write_metric_rows(&dir.path().join("eval.csv"), run.step, &metrics)?;
    let results: Vec<(String, String)> = metrics.iter().map(|(k, v)| (k.clone(), fmt_f64(*v))).collect();
    dir.write_manifest("eval", &run.cfg, &results)?;
    Ok(results)
}

fn interpolate(source: &Source, common: &Common, points: usize, from: usize, to: usize) -> Result<Vec<(String, String)>> {
    let run = load_run(source, common)?;
    let dir = out_dir(common, Some(source), "interpolate", &run.cfg)?;
    let ends = run.dataset.test.batch(&[from, to]);
    let mean = run.models.inference.encode_one(0, &ends.modalities[0])?.mean;
    let config = &run.models.config;
    // Modality-specific latents, if any, are held at their prior mean.
    let endpoint = |r: usize| {
        let mut state = LatentState::sample_prior(config, 1, &mut RngStream::new(0, "cli/interpolate"));
        state.z = mean.select_rows(&[r]);
        state.w.iter_mut().for_each(|w| *w = Tensor::zeros(w.shape()));
        state
    };
    let path = latent_interpolation(&run.models, &endpoint(0), &endpoint(1), points)?;
    write_samples(&dir, "interpolation", &MultimodalBatch::new(path)?, &run.cfg, points)?;
    dir.write_manifest("interpolate", &run.cfg, &[
        ("from".into(), from.to_string()),
        ("to".into(), to.to_string()),
        ("points".into(), points.to_string()),
    ])?;
    Ok(vec![("out".into(), dir.path().display().to_string())])
}

fn ablate(common: &Common, modes: &str, ks: &str, n: usize) -> Result<Vec<(String, String)>> {
    let cfg = load_config(common, None)?;
    let dataset = cfg.dataset.build()?;
    let dir = out_dir(common, None, "ablate", &cfg)?;
    let modes: Vec<TrainMode> = modes
        .split(',')
        .map(|m| {
            MODES
                .into_iter()
                .find(|&k| mode_name(k) == m.trim())
                .ok_or_else(|| invalid(format!("--modes: unknown mode {m:?}")))
        })
        .collect::<Result<_>>()?;
    let ks: Vec<usize> = parse_list("--k", ks)?;
    let mut arms = Vec::new();
    for &mode in &modes {
        for &k in &ks {
            let mut c = cfg.clone();
            c.train.mode = mode;
            c.sampler_x.steps = k;
            c.validate()?;
            arms.push((format!("{}-k{k}", mode_name(mode)), c));
        }
    }
    let results = interleaved_sweep(&arms, &dataset)?;
    let (real, _) = test_items(&dataset, n)?;
    let real_rows = joint_rows(&real)?;
    let bandwidth = median_bandwidth(&real_rows, &real_rows);
    let clf = match dataset.spec.num_classes() {
        Some(c) => Some(ToyClassifier::train(&dataset.train, &dataset.test, c, cfg.seed)?).filter(|c| c.require().is_ok()),
        None => None,
    };
    let mut rows = Vec::new();
    for (arm, (label, c)) in results.iter().zip(&arms) {
        let mut rng = RngStream::new(cfg.seed, "cli/ablate");
        let x = model_samples(c, &arm.output.state.models, real.batch_size(), &mut rng)?;
        let fid = match &clf {
            Some(clf) => fmt_f64(fid_surrogate(&real, &x, clf)?),
            None => String::new(),
        };
        let last = arm.output.reports.last();
        let mean_secs = arm.output.reports.iter().map(|r| r.wall_clock_secs).sum::<f64>() / arm.output.reports.len().max(1) as f64;
        rows.push(vec![
            label.clone(),
            mode_name(c.train.mode).to_string(),
            c.sampler_x.steps.to_string(),
            arm.output.state.step.to_string(),
            fmt_f64(arm.median_step_secs),
            fmt_f64(mean_secs),
            last.map(|r| fmt_f64(r.ebm_loss)).unwrap_or_default(),
            last.map(|r| fmt_f64(r.generator_recon_loss)).unwrap_or_default(),
            fmt_f64(mmd_rbf(&joint_rows(&x)?, &real_rows, Some(bandwidth))?),
            fid,
        ]);
    }
    write_table(
        &dir.path().join("ablation.csv"),
        &[
            "arm",
            "mode",
            "k_x",
            "steps",
            "median_step_secs",
            "mean_step_secs",
            "final_ebm_loss",
            "final_generator_recon_loss",
            "mmd",
            "fid_surrogate",
        ],
        &rows,
    )?;
    dir.write_manifest("ablate", &cfg, &[("arms".into(), arms.len().to_string())])?;
    Ok(vec![("out".into(), dir.path().display().to_string())])
}

const MODES: [TrainMode; 4] = [
    TrainMode::Cooperative,
    TrainMode::MleEbm,
    TrainMode::IndependentGenerator,
    TrainMode::IndependentInference,
];

fn mode_name(mode: TrainMode) -> &'static str {
    match mode {
        TrainMode::Cooperative => "cooperative",
        TrainMode::MleEbm => "mle-ebm",
        TrainMode::IndependentGenerator => "independent-generator",
        TrainMode::IndependentInference => "independent-inference",
    }
}

fn oracle(common: &Common) -> Result<Vec<(String, String)>> {
    let cfg = load_config(common, None)?;
    let checks = oracle_suite(cfg.seed)?;
    let dir = out_dir(common, None, "oracle", &cfg)?;
    let rows: Vec<Vec<String>> = checks
        .iter()
        .map(|c| vec![c.name.to_string(), fmt_f64(c.value), fmt_f64(c.threshold), c.passed().to_string()])
        .collect();
    write_table(&dir.path().join("oracle.csv"), &["check", "value", "threshold", "passed"], &rows)?;
    for c in &checks {
        println!("{} {} value={:.3e} threshold={:.1e}", if c.passed() { "PASS" } else { "FAIL" }, c.name, c.value, c.threshold);
    }
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed()).map(|c| c.name).collect();
    dir.write_manifest("oracle", &cfg, &[("failed".into(), failed.join(" "))])?;
    if !failed.is_empty() {
        return Err(invalid(format!("oracle checks failed: {}", failed.join(" "))));
    }
    Ok(Vec::new())
}

fn run(cli: Cli) -> Result<Vec<(String, String)>> {
    match &cli.command {
        Command::Train { common, resume } => train(common, resume.as_deref()),
        Command::Sample { source, common, n, observed } => sample(source, common, *n, observed.as_deref()),
        Command::Refine { source, common, n, observed } => refine(source, common, *n, observed),
        Command::Eval { source, common, n } => eval(source, common, *n),
        Command::Interpolate { source, common, points, from, to } => interpolate(source, common, *points, *from, *to),
        Command::Ablate { common, modes, k, n } => ablate(common, modes, k, *n),
        Command::Oracle { common } => oracle(common),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(results) => {
            for (k, v) in results {
                println!("{k} = {v}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            let message = e.to_string().replace('\n', " ");
            eprintln!("error class={} message={message}", e.class());
            ExitCode::FAILURE
        }
    }
}
