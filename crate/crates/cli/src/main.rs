use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use scaresnet::config;
use scaresnet::io;
use scaresnet::synth::{self, SynthConfig};
use scaresnet::train::{train_model, DemoConfig};
use scaresnet_core::backbone::{count_params_flops, shape_trace, BackboneConfig, Preset};
use scaresnet_core::gradcheck::{check_module, ModuleTag};
use scaresnet_core::sppr_math::{enumerate_level_solutions, pooling_params, Interpretation};

/// Size-agnostic backbone toolkit. Every command prints one JSON document on
/// stdout; human-readable notes go to stderr.
#[derive(Parser)]
#[command(name = "scaresnet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Enumerate pyramid levels whose pooled maps reshape into one square.
    SolveLevels {
        /// Upper bound on each witness component.
        #[arg(long, default_value_t = 20)]
        max: u64,
    },
    /// Pooling kernel, stride and padding that map extent `h` to `l`.
    PoolParams {
        #[arg(long)]
        h: u64,
        #[arg(long)]
        l: u64,
        #[arg(long, default_value = "literal")]
        interpretation: Interpretation,
    },
    /// Per-block shapes, parameters and multiply-adds for one input size.
    ShapeTrace(NetArgs),
    /// Parameter and multiply-add totals, optionally against plain convolutions.
    ParamCount {
        #[command(flatten)]
        net: NetArgs,
        #[arg(long)]
        compare_plain: bool,
    },
    /// Finite-difference gradient check of one module.
    GradCheck {
        #[arg(long)]
        module: ModuleTag,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a synthetic line-detection dataset.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        size_min: Option<usize>,
        #[arg(long)]
        size_max: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the binary line detector on a dataset.
    TrainDemo {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory; a default synthetic set is generated in memory
        /// when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Save the trained parameters here.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

#[derive(Args)]
struct NetArgs {
    /// Backbone JSON; its fields override the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `mini` or `scaresnet-50`.
    #[arg(long, value_parser = parse_preset)]
    preset: Option<Preset>,
    /// Input height; defaults to the smallest accepted size.
    #[arg(long)]
    h: Option<usize>,
    #[arg(long)]
    w: Option<usize>,
}

fn parse_preset(s: &str) -> Result<Preset, String> {
    serde_json::from_value(serde_json::Value::String(s.into())).map_err(|_| format!("unknown preset {s:?}"))
}

impl NetArgs {
    fn resolve(&self) -> Result<(BackboneConfig, usize, usize)> {
        let mut doc = match &self.config {
            Some(p) => config::read_json(p)?,
            None => serde_json::json!({}),
        };
        if let Some(preset) = self.preset {
            doc["preset"] = serde_json::to_value(preset)?;
        }
        let cfg = config::backbone_from_value(doc)?;
        cfg.validate()?;
        let min = cfg.min_input();
        Ok((cfg, self.h.unwrap_or(min), self.w.unwrap_or(min)))
    }
}

fn emit<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string(value)?);
    Ok(())
}

/// Runs the command; `Ok(false)` means it completed but its check failed.
fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::SolveLevels { max } => {
            let sols = enumerate_level_solutions(max);
            eprintln!("{} level sets with witness components up to {max}", sols.len());
            emit(&sols)?;
        }
        Command::PoolParams { h, l, interpretation } => {
            emit(&pooling_params(h, l, interpretation)?)?;
        }
        Command::ShapeTrace(net) => {
            let (cfg, h, w) = net.resolve()?;
            let trace = shape_trace(&cfg, h, w)?;
            for row in &trace.rows {
                eprintln!(
                    "{:<16} {:?} -> {:?}  params {}",
                    row.name, row.input, row.output, row.params
                );
            }
            emit(&trace)?;
        }
        Command::ParamCount { net, compare_plain } => {
            let (cfg, h, w) = net.resolve()?;
            let report = count_params_flops(&cfg, h, w, compare_plain)?;
            eprintln!("params {}  mult-adds {}", report.total.params, report.total.mult_adds);
            if let Some(p) = &report.plain {
                eprintln!("separable/plain parameter ratio {:.4}", p.dse_param_ratio);
            }
            emit(&report)?;
        }
        Command::GradCheck { module, seed } => {
            let report = check_module(module, seed)?;
            eprintln!(
                "{module}: max rel err {:.3e} (threshold {:.0e}), {} probes, {} skipped at kinks",
                report.max_rel_err, report.threshold, report.checked, report.skipped_at_kinks
            );
            emit(&report)?;
            return Ok(report.passed);
        }
        Command::GenData {
            config: path,
            n,
            size_min,
            size_max,
            seed,
            out,
        } => {
            let mut cfg = config::load(path.as_deref(), &SynthConfig::default())?;
            cfg.n = n.unwrap_or(cfg.n);
            cfg.size_min = size_min.unwrap_or(cfg.size_min);
            cfg.size_max = size_max.unwrap_or(cfg.size_max);
            cfg.seed = seed.unwrap_or(cfg.seed);
            cfg.validate(BackboneConfig::mini().min_input())?;
            let samples = synth::generate(&cfg);
            synth::write_dataset(&out, &cfg, &samples)?;
            let info = synth::read_info(&out)?;
            eprintln!(
                "wrote {} samples ({} positive) to {}",
                cfg.n,
                info.positives,
                out.display()
            );
            emit(&info)?;
        }
        Command::TrainDemo {
            config: path,
            data,
            steps,
            lr,
            seed,
            checkpoint,
        } => {
            let mut cfg = config::load(path.as_deref(), &DemoConfig::default())?;
            cfg.steps = steps.unwrap_or(cfg.steps);
            cfg.lr = lr.unwrap_or(cfg.lr);
            cfg.seed = seed.unwrap_or(cfg.seed);
            cfg.backbone.validate()?;
            let samples = match &data {
                Some(dir) => synth::read_dataset(dir)?,
                None => synth::generate(&SynthConfig {
                    seed: cfg.seed,
                    ..SynthConfig::default()
                }),
            };
            let min = cfg.backbone.min_input();
            for s in &samples {
                let (h, w) = (s.image.shape()[1], s.image.shape()[2]);
                cfg.backbone
                    .check_input(h, w)
                    .with_context(|| format!("sample {} ({h}x{w}, minimum {min})", s.index))?;
            }
            let (report, model) = train_model(&samples, &cfg)?;
            eprintln!(
                "loss {:.4} -> {:.4}, accuracy {:.3} -> {:.3}, {:.1}s",
                report.initial_loss,
                report.final_loss,
                report.initial_accuracy,
                report.final_accuracy,
                report.wall_clock_secs
            );
            if let Some(dir) = checkpoint {
                io::save_checkpoint(&dir, &cfg.backbone, cfg.seed, &model.net.params)?;
                eprintln!("checkpoint written to {}", dir.display());
            }
            emit(&report)?;
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
