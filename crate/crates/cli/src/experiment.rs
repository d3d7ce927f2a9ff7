//! Training runs, ablation sweeps and spectrum export.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use spectral_forecaster::data::{
    exclude_channels, load_csv, make_windows, synth_three_sine, RawSeries, SyntheticSpec,
    WindowStream,
};
use spectral_forecaster::layers::ForwardCtx;
use spectral_forecaster::model::{
    count_parameters, save_checkpoint, FilterFormer, FilterPlacement, Forecaster, ModelConfig,
};
use spectral_forecaster::numeric::{Tape, Tensor};
use spectral_forecaster::spectral::{mean_amplitude_spectrum, write_amplitude_csv};
use spectral_forecaster::training::{
    evaluate, fit, write_loss_curve, write_metrics, EpochLoss, Metrics,
};
use spectral_forecaster::Error;

use crate::config::{ConfigError, ExperimentConfig};

/// Windows used as the probe input for embedding spectra.
pub const PROBE_WINDOWS: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizonReport {
    pub horizon: usize,
    pub metrics: Metrics,
    pub parameter_count: usize,
    pub parameter_breakdown: Vec<(String, usize)>,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub loss_curve: Vec<EpochLoss>,
    /// Artifact paths relative to the run directory.
    pub loss_curve_csv: PathBuf,
    pub checkpoint: PathBuf,
    pub filter_spectra: Vec<PathBuf>,
    pub embedding_spectra: Vec<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub tag: String,
    pub seed: u64,
    pub channels: Vec<String>,
    pub horizons: Vec<HorizonReport>,
    pub metrics_csv: PathBuf,
}

impl RunReport {
    pub fn metrics(&self, horizon: usize) -> Option<Metrics> {
        self.horizons
            .iter()
            .find(|h| h.horizon == horizon)
            .map(|h| h.metrics)
    }
}

/// Loads the configured series and drops excluded channels.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<RawSeries> {
    cfg.validate()?;
    let d = &cfg.dataset;
    let rs = if let Some(path) = &d.path {
        load_csv(path).context("loading dataset")?
    } else if let Some(spec) = &d.synthetic {
        synth_three_sine(spec).context("generating synthetic series")?
    } else {
        let path = d.synthetic_spec.as_ref().expect("validated");
        let text = fs::read_to_string(path)
            .map_err(|e| Error::io(path, e))
            .with_context(|| format!("reading synthetic spec {}", path.display()))?;
        let spec = SyntheticSpec::from_json(&text)
            .map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        synth_three_sine(&spec)?
    };
    exclude_channels(&rs, &cfg.exclude_channels).context("excluding channels")
}

/// Amplitude spectra of every filter plus mean amplitude spectra of what
/// each filter received and produced on a probe batch.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectraExport {
    pub filters: Vec<Vec<f64>>,
    pub embedding: Vec<EmbeddingSpectrum>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSpectrum {
    pub pre: Vec<f64>,
    pub post: Vec<f64>,
}

impl EmbeddingSpectrum {
    /// Mean of `post / pre` over the given bins.
    pub fn mean_ratio(&self, bins: std::ops::Range<usize>) -> f64 {
        let n = bins.len() as f64;
        bins.map(|k| self.post[k] / self.pre[k]).sum::<f64>() / n
    }
}

/// Runs `model` in eval mode on `probe` (`[batch, channels, lookback]`).
pub fn export_spectra(model: &FilterFormer, probe: &Tensor) -> Result<SpectraExport> {
    let ids = model.filter_ids();
    if ids.is_empty() {
        bail!(Error::invalid(
            "model has no filters (alpha = 0): nothing to export"
        ));
    }
    let store = model.params();
    let filters = ids
        .iter()
        .map(|&id| spectral_forecaster::spectral::amplitude_spectrum(store.get(id).data()))
        .collect::<Result<Vec<_>, _>>()?;
    let mut tape = Tape::new();
    let x = tape.constant(probe.clone());
    let trace = model.forward_traced(&mut tape, x, &mut ForwardCtx::eval())?;
    let embedding = trace
        .filters
        .iter()
        .map(|t| {
            Ok(EmbeddingSpectrum {
                pre: mean_amplitude_spectrum(tape.data(t.filter_input), t.axis_len)?,
                post: mean_amplitude_spectrum(tape.data(t.filter_output), t.axis_len)?,
            })
        })
        .collect::<Result<Vec<_>, Error>>()?;
    Ok(SpectraExport { filters, embedding })
}

impl SpectraExport {
    /// Writes `filter_{i}_spectrum.csv` and `embedding_{i}_spectrum.csv`
    /// into `dir`; returns the file names.
    pub fn write(&self, dir: &Path) -> Result<(Vec<PathBuf>, Vec<PathBuf>)> {
        let mut filters = Vec::new();
        for (i, amps) in self.filters.iter().enumerate() {
            let name = PathBuf::from(format!("filter_{i}_spectrum.csv"));
            write_amplitude_csv(&dir.join(&name), amps)?;
            filters.push(name);
        }
        let mut embedding = Vec::new();
        for (i, e) in self.embedding.iter().enumerate() {
            let name = PathBuf::from(format!("embedding_{i}_spectrum.csv"));
            let mut text = String::from("bin_index,pre_amplitude,post_amplitude\n");
            for (k, (a, b)) in e.pre.iter().zip(&e.post).enumerate() {
                text.push_str(&format!("{k},{a:e},{b:e}\n"));
            }
            let path = dir.join(&name);
            fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
            embedding.push(name);
        }
        Ok((filters, embedding))
    }
}

/// Up to [`PROBE_WINDOWS`] windows spread evenly over `stream`.
pub fn probe_batch(stream: &WindowStream) -> Result<Tensor> {
    let n = stream.len().min(PROBE_WINDOWS);
    let idx: Vec<usize> = (0..n).map(|i| i * stream.len() / n).collect();
    Ok(stream.batch(&idx)?.0)
}

/// Trains and evaluates one horizon; artifacts go to `dir`.
pub fn run_horizon(
    cfg: &ExperimentConfig,
    rs: &RawSeries,
    horizon: usize,
    dir: &Path,
) -> Result<(HorizonReport, FilterFormer)> {
    let model_cfg = ModelConfig {
        horizon,
        channels: rs.channel_count(),
        ..cfg.model.clone()
    };
    let splits = make_windows(rs, &cfg.split_for_dataset(), model_cfg.lookback, horizon)
        .with_context(|| format!("windowing for horizon {horizon}"))?;
    let mut model = FilterFormer::new(model_cfg.clone(), cfg.seed)?;
    let train_cfg = spectral_forecaster::training::TrainConfig {
        seed: cfg.seed,
        ..cfg.train.clone()
    };
    let fitted = fit(&mut model, &splits.train, &splits.val, &train_cfg)
        .with_context(|| format!("training horizon {horizon}"))?;
    let metrics = evaluate(&model, &splits.test, train_cfg.batch_size)?;
    log::info!(
        "horizon {horizon}: test mse {:.6e}, mae {:.6e}",
        metrics.mse,
        metrics.mae
    );

    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let sub = PathBuf::from(format!("h{horizon}"));
    let loss_curve_csv = sub.join("loss_curve.csv");
    let checkpoint = sub.join("model.ckpt");
    let abs = dir.join(&sub);
    fs::create_dir_all(&abs).map_err(|e| Error::io(&abs, e))?;
    write_loss_curve(&dir.join(&loss_curve_csv), &fitted.curve)?;
    save_checkpoint(&dir.join(&checkpoint), &model)?;
    let (filter_spectra, embedding_spectra) = if model.filter_ids().is_empty() {
        (Vec::new(), Vec::new())
    } else {
        let (f, e) = export_spectra(&model, &probe_batch(&splits.test)?)?.write(&abs)?;
        (
            f.into_iter().map(|p| sub.join(p)).collect(),
            e.into_iter().map(|p| sub.join(p)).collect(),
        )
    };
    let count = count_parameters(&model_cfg)?;
    Ok((
        HorizonReport {
            horizon,
            metrics,
            parameter_count: count.total,
            parameter_breakdown: count.components,
            epochs_run: fitted.epochs_run,
            best_epoch: fitted.best_epoch,
            stopped_early: fitted.stopped_early,
            loss_curve: fitted.curve,
            loss_curve_csv,
            checkpoint,
            filter_spectra,
            embedding_spectra,
        },
        model,
    ))
}

/// Trains and evaluates every configured horizon and writes `report.json`
/// and `metrics.csv` into the output directory.
pub fn run(cfg: &ExperimentConfig) -> Result<RunReport> {
    let rs = load_dataset(cfg)?;
    let dir = &cfg.out_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut horizons = Vec::new();
    for h in cfg.horizons() {
        horizons.push(run_horizon(cfg, &rs, h, dir)?.0);
    }
    let metrics_csv = PathBuf::from("metrics.csv");
    let rows: Vec<_> = horizons.iter().map(|h| (h.horizon, h.metrics)).collect();
    write_metrics(&dir.join(&metrics_csv), &rows)?;
    let report = RunReport {
        tag: cfg.tag.clone(),
        seed: cfg.seed,
        channels: rs.channels.clone(),
        horizons,
        metrics_csv,
    };
    let path = dir.join("report.json");
    let json = serde_json::to_string_pretty(&report)?;
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub setting: String,
    pub metrics: Metrics,
}

fn write_table(path: &Path, axis: &str, rows: &[AblationRow]) -> Result<()> {
    let mut text = format!("{axis},mse,mae\n");
    for r in rows {
        text.push_str(&format!(
            "{},{:e},{:e}\n",
            r.setting, r.metrics.mse, r.metrics.mae
        ));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn sweep<T: ToString>(
    base: &ExperimentConfig,
    axis: &str,
    settings: &[T],
    configure: impl Fn(&mut ExperimentConfig, &T),
) -> Result<Vec<AblationRow>> {
    if settings.is_empty() {
        bail!(ConfigError(format!("{axis} list is empty")));
    }
    let horizon = base.horizons()[0];
    let mut rows = Vec::new();
    for s in settings {
        let mut cfg = base.clone();
        cfg.horizons = vec![horizon];
        configure(&mut cfg, s);
        cfg.out_dir = base.out_dir.join(format!("{axis}_{}", s.to_string()));
        cfg.model
            .validate()
            .map_err(|e| ConfigError(format!("{axis} = {}: {e}", s.to_string())))?;
        let report = run(&cfg).with_context(|| format!("{axis} = {}", s.to_string()))?;
        rows.push(AblationRow {
            setting: s.to_string(),
            metrics: report.horizons[0].metrics,
        });
    }
    fs::create_dir_all(&base.out_dir).map_err(|e| Error::io(&base.out_dir, e))?;
    write_table(
        &base.out_dir.join(format!("ablate_{axis}.csv")),
        axis,
        &rows,
    )?;
    Ok(rows)
}

/// Varies the number of spectral blocks at a fixed total depth.
pub fn ablate_alpha(base: &ExperimentConfig, alphas: &[usize]) -> Result<Vec<AblationRow>> {
    sweep(base, "alpha", alphas, |cfg, &a| cfg.model.alpha = a)
}

/// Varies the number of attention blocks on top of a fixed spectral stack.
pub fn ablate_layers(base: &ExperimentConfig, counts: &[usize]) -> Result<Vec<AblationRow>> {
    sweep(base, "attention_blocks", counts, |cfg, &n| {
        cfg.model.total_layers = cfg.model.alpha + n;
    })
}

/// Filters after the embedding, right after RevIN, and no filters at all.
pub fn ablate_placement(base: &ExperimentConfig) -> Result<Vec<AblationRow>> {
    let alpha = base.model.alpha.max(1);
    sweep(base, "placement", &["post", "pre", "none"], |cfg, &p| {
        match p {
            "post" => {
                cfg.model.filter_placement = FilterPlacement::PostEmbedding;
                cfg.model.alpha = alpha;
            }
            "pre" => {
                cfg.model.filter_placement = FilterPlacement::PreEmbedding;
                cfg.model.alpha = alpha;
            }
            _ => cfg.model.alpha = 0,
        }
        cfg.model.total_layers = cfg.model.total_layers.max(alpha);
    })
}

/// Writes a synthetic series as a CSV with an integer time column.
pub fn write_series_csv(path: &Path, rs: &RawSeries) -> Result<()> {
    let mut text = String::from("date");
    for c in &rs.channels {
        text.push(',');
        text.push_str(c);
    }
    text.push('\n');
    for (t, row) in rs.values.chunks(rs.channel_count()).enumerate() {
        text.push_str(&t.to_string());
        for v in row {
            text.push_str(&format!(",{v:e}"));
        }
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(())
}
