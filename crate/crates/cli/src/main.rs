use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use spectral_forecaster::data::{make_windows, synth_three_sine, ChannelRef, SyntheticSpec};
use spectral_forecaster::model::{count_parameters, load_checkpoint, Forecaster, ModelConfig};
use spectral_forecaster::Error;
use spectral_forecaster_cli::experiment::{load_dataset, probe_batch, write_series_csv};
use spectral_forecaster_cli::{
    ablate_alpha, ablate_layers, ablate_placement, exit_code, export_spectra, parse_list, run,
    AblationRow, ConfigError, DatasetConfig, ExperimentConfig,
};

#[derive(Parser)]
#[command(
    name = "spectral-forecaster",
    version,
    about = "Patch transformer forecasting with learnable frequency filters"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate one model per horizon.
    Run(Common),
    /// Sweep the number of spectral blocks at fixed total depth.
    AblateAlpha {
        #[command(flatten)]
        common: Common,
        /// Comma-separated alpha values.
        #[arg(long, default_value = "0,1,2,3")]
        alphas: String,
    },
    /// Sweep the number of attention blocks.
    AblateLayers {
        #[command(flatten)]
        common: Common,
        /// Comma-separated attention block counts.
        #[arg(long, default_value = "1,2,3")]
        counts: String,
    },
    /// Compare filters after the embedding, before it, and none.
    AblatePlacement(Common),
    /// Write filter and embedding spectra of a saved model.
    ExportSpectra {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Print the parameter count of the configured model as JSON.
    ParamCount(Common),
    /// Write a synthetic sum-of-sines series as CSV.
    Synth {
        /// JSON spec; the default three-sine signal when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, short)]
        output: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; built-in synthetic defaults when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Dataset CSV, overriding the config.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated horizons, e.g. 96,192,336,720.
    #[arg(long)]
    horizon: Option<String>,
    /// Comma-separated channel indices or names to drop.
    #[arg(long)]
    exclude_channels: Option<String>,
    /// Tiny model and short training, for smoke tests.
    #[arg(long)]
    tiny: bool,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::from_file(p)?,
            None => ExperimentConfig::default(),
        };
        if self.tiny {
            cfg.apply_tiny();
        }
        if let Some(p) = &self.data {
            cfg.dataset = DatasetConfig {
                path: Some(p.clone()),
                ..DatasetConfig::default()
            };
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        if let Some(h) = &self.horizon {
            cfg.horizons = parse_list(h)?;
        }
        if let Some(list) = &self.exclude_channels {
            cfg.exclude_channels = parse_list::<ChannelRef>(list)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn print_rows(axis: &str, rows: &[AblationRow]) {
    println!("{axis},mse,mae");
    for r in rows {
        println!("{},{:.6},{:.6}", r.setting, r.metrics.mse, r.metrics.mae);
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(common) => {
            let cfg = common.resolve()?;
            let report = run(&cfg)?;
            println!("horizon,mse,mae");
            for h in &report.horizons {
                println!("{},{:.6},{:.6}", h.horizon, h.metrics.mse, h.metrics.mae);
            }
        }
        Command::AblateAlpha { common, alphas } => {
            let cfg = common.resolve()?;
            print_rows("alpha", &ablate_alpha(&cfg, &parse_list(&alphas)?)?);
        }
        Command::AblateLayers { common, counts } => {
            let cfg = common.resolve()?;
            print_rows(
                "attention_blocks",
                &ablate_layers(&cfg, &parse_list(&counts)?)?,
            );
        }
        Command::AblatePlacement(common) => {
            let cfg = common.resolve()?;
            print_rows("placement", &ablate_placement(&cfg)?);
        }
        Command::ExportSpectra { common, checkpoint } => {
            let cfg = common.resolve()?;
            let model = load_checkpoint(&checkpoint)?;
            let rs = load_dataset(&cfg)?;
            if rs.channel_count() != model.config().channels {
                return Err(ConfigError(format!(
                    "checkpoint expects {} channels, dataset has {}",
                    model.config().channels,
                    rs.channel_count()
                ))
                .into());
            }
            let splits = make_windows(
                &rs,
                &cfg.split_for_dataset(),
                model.lookback(),
                model.horizon(),
            )?;
            let export = export_spectra(&model, &probe_batch(&splits.test)?)?;
            std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
            let (filters, embedding) = export.write(&cfg.out_dir)?;
            for p in filters.iter().chain(&embedding) {
                println!("{}", cfg.out_dir.join(p).display());
            }
        }
        Command::ParamCount(common) => {
            let cfg = common.resolve()?;
            let model = ModelConfig {
                horizon: cfg.horizons()[0],
                ..cfg.model
            };
            let count = count_parameters(&model)?;
            let mut map = serde_json::Map::new();
            map.insert("total".into(), count.total.into());
            for (name, n) in count.components {
                map.insert(name, n.into());
            }
            println!("{}", serde_json::to_string_pretty(&map)?);
        }
        Command::Synth { spec, output } => {
            let spec = match spec {
                Some(p) => {
                    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
                    SyntheticSpec::from_json(&text)
                        .map_err(|e| ConfigError(format!("{}: {e}", p.display())))?
                }
                None => SyntheticSpec::default(),
            };
            let rs = synth_three_sine(&spec)?;
            write_series_csv(&output, &rs)
                .with_context(|| format!("writing {}", output.display()))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err) as u8)
        }
    }
}
