//! Subcommand implementations. Each command reads its inputs from the
//! output directory (or configured paths), writes artifacts there, and
//! leaves a resolved-config snapshot `<command>.config.toml` alongside.

use std::path::{Path, PathBuf};

use ccfg_core::denoiser::{prepare_examples, read_checkpoint, train, write_checkpoint, LossRecord, TrainedDenoiser};
use ccfg_core::diffusion::NoiseSchedule;
use ccfg_core::grid::{read_dataset, sample_crop, write_dataset, Dataset, SyntheticDomain};
use ccfg_core::guidance::{Guidance, Scheme, SubsetWeights};
use ccfg_core::metrics::{baseline_predictions, metric_rows, sample_predictions, MetricRow, PredictionSet};
use ccfg_core::selection::{run_selection, SelectionItem};
use ccfg_core::{Error, Result};
use log::info;

use crate::config::ExperimentConfig;
use crate::io::{grid_to_delimited, grid_to_pgm, range, PredictionFile};

pub struct Context {
    pub config: ExperimentConfig,
    pub out: PathBuf,
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

impl Context {
    pub fn new(config: ExperimentConfig, out: PathBuf) -> Self {
        Self { config, out }
    }

    fn snapshot(&self, command: &str) -> Result<()> {
        write(&self.out.join(format!("{command}.config.toml")), self.config.to_toml()?)
    }

    fn dataset_dir(&self) -> PathBuf {
        self.config.paths.dataset_dir.clone().unwrap_or_else(|| self.out.join("data"))
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.config.paths.checkpoint.clone().unwrap_or_else(|| self.out.join("model.toml"))
    }

    pub fn weights_path(&self) -> PathBuf {
        self.config.paths.weights.clone().unwrap_or_else(|| self.out.join("weights.toml"))
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.config.paths.metrics.clone().unwrap_or_else(|| self.out.join("metrics.csv"))
    }

    pub fn predictions_path(&self, scheme: Scheme) -> PathBuf {
        self.out.join(format!("predictions-{scheme}.txt"))
    }

    fn schedule(&self) -> Result<NoiseSchedule> {
        self.config.schedule.build()
    }

    /// A split restricted to the configured input variables, keeping the
    /// split's stored statistics.
    fn load_split(&self, split: &str) -> Result<Dataset> {
        let ds = read_dataset(&self.dataset_dir().join(format!("{split}.toml")))?;
        let names = self.config.data.setup.input_names();
        let pairs = ds.pairs.iter().map(|p| p.with_inputs(names)).collect::<Result<Vec<_>>>()?;
        Dataset::from_pairs_with_stats(pairs, ds.stats)
    }

    fn eval_pairs(&self) -> Result<Vec<ccfg_core::grid::SamplePair>> {
        let ds = self.load_split("eval")?;
        let n = self.config.evaluate.max_timestamps.unwrap_or(ds.len()).min(ds.len());
        ds.pairs[..n]
            .iter()
            .map(|p| match self.config.evaluate.crop {
                Some(c) => sample_crop(p, c, 0, true),
                None => Ok(p.clone()),
            })
            .collect()
    }

    fn guidance(&self, scheme: Scheme) -> Result<Guidance> {
        Ok(match scheme {
            Scheme::Direct => Guidance::Direct,
            Scheme::Cfg => Guidance::Cfg(self.config.guidance.cfg_weight),
            Scheme::Ccfg => {
                let path = self.weights_path();
                Guidance::Composite(SubsetWeights::from_toml(&read_text(&path)?)?)
            }
        })
    }
}

pub fn cmd_generate(ctx: &Context) -> Result<()> {
    let c = &ctx.config.data;
    let domain = SyntheticDomain::new(c.domain_seed, c.domain.clone())?;
    let make = |range: std::ops::Range<usize>, prefix: &str| {
        range
            .map(|i| domain.pair(i as u64, format!("{prefix}-{i:05}")))
            .collect::<Result<Vec<_>>>()
    };
    let train = Dataset::from_pairs(make(0..c.train_count, "train")?)?;
    let eval = Dataset::from_pairs_with_stats(make(c.train_count..c.train_count + c.eval_count, "eval")?, train.stats.clone())?;
    let dir = ctx.dataset_dir();
    std::fs::create_dir_all(&dir).map_err(|e| Error::Io {
        path: dir.clone(),
        source: e,
    })?;
    write_dataset(&train, &dir.join("train.toml"))?;
    write_dataset(&eval, &dir.join("eval.toml"))?;
    info!("wrote {} training and {} evaluation timestamps to {}", train.len(), eval.len(), dir.display());
    ctx.snapshot("generate")
}

pub fn cmd_train(ctx: &Context) -> Result<TrainedDenoiser> {
    let ds = ctx.load_split("train")?;
    let mut model = TrainedDenoiser::for_dataset(&ds, |c| ctx.config.model.architecture(c), ctx.config.model.init_seed)?;
    info!("training {} parameters on {} timestamps", model.model.param_count(), ds.len());
    let examples = prepare_examples(&ds)?;
    let report = train(&mut model, &examples, &ctx.config.train, &ctx.schedule()?)?;
    write_checkpoint(&model, &ctx.checkpoint_path())?;
    write(&ctx.out.join("train_curve.csv"), LossRecord::to_delimited(&report.curve))?;
    if let Some(last) = report.curve.last() {
        info!("final loss {:.5} (L1 {:.5})", last.total, last.l1);
    }
    ctx.snapshot("train")?;
    Ok(model)
}

pub fn cmd_select(ctx: &Context) -> Result<SubsetWeights> {
    let model = read_checkpoint(&ctx.checkpoint_path())?;
    let ds = ctx.load_split("train")?;
    let n = ctx.config.guidance.selection_items.min(ds.len());
    let items = ds.pairs[..n]
        .iter()
        .map(|p| {
            Ok(SelectionItem {
                denoiser: Box::new(model.bind(p.assemble_conditioning()?)?),
                target: p.target_tensor()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let (weights, trace) = run_selection(&items, model.groups.clone(), &ctx.config.selection, &ctx.schedule()?)?;
    for e in trace.prune_events() {
        info!("iteration {}: pruned {} (weight {:.4})", e.iteration, e.label, e.weight);
    }
    write(&ctx.weights_path(), weights.to_toml()?)?;
    write(&ctx.out.join("selection_trace.csv"), trace.to_delimited())?;
    ctx.snapshot("select")?;
    Ok(weights)
}

fn sample_scheme(ctx: &Context, model: &TrainedDenoiser, scheme: Scheme, members: usize) -> Result<(PredictionSet, PredictionFile)> {
    let pairs = ctx.eval_pairs()?;
    let sampler = ctx.config.sampler.with_ensemble(members);
    let guidance = ctx.guidance(scheme)?;
    let (set, winds) = sample_predictions(model, &pairs, &guidance, &sampler, &ctx.schedule()?)?;
    let (height, width) = set.shape();
    let file = PredictionFile {
        scheme: scheme.to_string(),
        height,
        width,
        nfe: set.nfe(),
        entries: set.ids().iter().cloned().zip(winds).collect(),
    };
    Ok((set, file))
}

pub fn cmd_sample(ctx: &Context) -> Result<PathBuf> {
    let model = read_checkpoint(&ctx.checkpoint_path())?;
    let scheme = ctx.config.guidance.scheme;
    let (set, file) = sample_scheme(ctx, &model, scheme, ctx.config.sampler.ensemble_count)?;
    let path = ctx.predictions_path(scheme);
    write(&path, file.to_text())?;
    info!("{scheme}: {} timestamps x {} members, {} NFEs", set.len(), set.ensemble_size(), set.nfe());
    ctx.snapshot("sample")?;
    Ok(path)
}

pub fn cmd_evaluate(ctx: &Context) -> Result<Vec<MetricRow>> {
    let model = read_checkpoint(&ctx.checkpoint_path())?;
    let e = &ctx.config.evaluate;
    let k = model.groups.len();
    let largest = *e.ensemble_sizes.iter().max().expect("validated non-empty");
    let mut rows = Vec::new();
    if e.baseline {
        let set = baseline_predictions(&ctx.eval_pairs()?)?;
        rows.extend(metric_rows(&e.model_name, &e.domain_name, "bicubic", 0, &set));
    }
    for &scheme in &e.schemes {
        let guidance = ctx.guidance(scheme)?;
        let (set, _) = sample_scheme(ctx, &model, scheme, largest)?;
        let steps = ctx.config.sampler.steps as u64;
        let per_step = set.nfe() / (steps * set.len() as u64 * largest as u64);
        if per_step != guidance.nfe_per_step(k) as u64 || set.nfe() % (steps * set.len() as u64 * largest as u64) != 0 {
            return Err(Error::Numeric(format!(
                "{scheme}: counted {} calls, inconsistent with {} per step",
                set.nfe(),
                guidance.nfe_per_step(k)
            )));
        }
        for &n in &e.ensemble_sizes {
            let sub = set.truncated(n)?;
            rows.extend(metric_rows(&e.model_name, &e.domain_name, &scheme.to_string(), per_step as usize, &sub));
            info!("{scheme} x{n}: T-RMSE {:.4} m/s, MM-RMSE {:.4} m/s", sub.t_rmse(), sub.mm_rmse());
        }
    }
    write(&ctx.metrics_path(), MetricRow::to_delimited(&rows))?;
    ctx.snapshot("evaluate")?;
    Ok(rows)
}

/// Mean maps of truth and prediction and their bias, from the prediction
/// file written by `sample`.
pub fn cmd_export_maps(ctx: &Context) -> Result<Vec<PathBuf>> {
    let scheme = ctx.config.guidance.scheme;
    let file = PredictionFile::parse(&read_text(&ctx.predictions_path(scheme))?)?;
    let pairs = ctx.eval_pairs()?;
    let mut truths = Vec::with_capacity(file.entries.len());
    for (id, _) in &file.entries {
        let pair = pairs
            .iter()
            .find(|p| &p.timestamp_id == id)
            .ok_or_else(|| Error::Validation(format!("timestamp {id} is not in the evaluation set")))?;
        truths.push(pair.hr_speed()?.clone());
    }
    let set = PredictionSet::new(
        file.entries.iter().map(|(id, _)| id.clone()).collect(),
        file.entries.iter().map(|(_, ms)| ms.iter().map(|m| m.speed.clone()).collect()).collect(),
        truths,
        file.nfe,
    )?;
    let truth = set.truth_mean_map();
    let pred = set.prediction_mean_map();
    let bias = set.bias_map();
    // truth and prediction share a colour scale; bias is symmetric about 0
    let (tl, th) = range(&truth);
    let (pl, ph) = range(&pred);
    let (lo, hi) = (tl.min(pl), th.max(ph));
    let b = bias.values().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let dir = ctx.out.join("maps");
    let mut written = Vec::new();
    for (name, g, l, h) in [
        ("truth_mean".to_string(), &truth, lo, hi),
        (format!("{scheme}_mean"), &pred, lo, hi),
        (format!("{scheme}_bias"), &bias, -b, b),
    ] {
        let pgm = dir.join(format!("{name}.pgm"));
        let csv = dir.join(format!("{name}.csv"));
        write(&pgm, grid_to_pgm(g, l, h))?;
        write(&csv, grid_to_delimited(g))?;
        written.extend([pgm, csv]);
    }
    info!("{scheme}: MM-RMSE {:.4} m/s over {} timestamps", set.mm_rmse(), set.len());
    ctx.snapshot("export-maps")?;
    Ok(written)
}
