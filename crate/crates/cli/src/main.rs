use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use sdgseg::pipeline::commands::{cmd_ablate, cmd_eval, cmd_finetune, cmd_gen_prompts, cmd_synth_data, cmd_train_agm};
use sdgseg::pipeline::{AblationAxis, JitterSpec, PipelineConfig};

/// Single-source domain-generalised promptable segmentation.
#[derive(Parser, Debug)]
#[command(name = "sdgseg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic multi-domain dataset and its manifest.
    SynthData(Common),
    /// Train the prompt generator on the source training split.
    TrainAgm(Common),
    /// Write one box-prompt table per evaluation domain.
    GenPrompts {
        #[command(flatten)]
        common: Common,
        /// Prompt-generator checkpoint (default: <output>/agm.ckpt).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Restrict to these domains.
        #[arg(long = "domain")]
        domains: Vec<String>,
    },
    /// Fine-tune the segmenter decoder with frozen encoders.
    Finetune {
        #[command(flatten)]
        common: Common,
        /// Prompt table covering the source training images (default: ground-truth boxes).
        #[arg(long)]
        prompts: Option<PathBuf>,
    },
    /// Evaluate the segmenter and write per-domain Dice and overlays.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Segmenter checkpoint (default: <output>/segmenter.ckpt).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long = "domain")]
        domains: Vec<String>,
    },
    /// Run an ablation grid with shared seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        axis: Axis,
    },
}

#[derive(Args, Debug)]
struct Common {
    /// TOML configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Feature-statistics perturbation in the prompt generator.
    #[arg(long, value_enum)]
    sufm: Option<Switch>,
    /// Prompt/image embedding fusion in the segmenter decoder.
    #[arg(long, value_enum)]
    ipef: Option<Switch>,
    /// Use tight ground-truth boxes instead of generated prompts.
    #[arg(long)]
    use_gt_boxes: bool,
    /// Jitter boxes: scale factor, then shift as a fraction of the image side.
    #[arg(long, num_args = 2, value_names = ["SCALE", "SHIFT"])]
    jitter: Option<Vec<f64>>,
    /// Output directory for checkpoints, tables and overlays.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Axis {
    Module,
    Position,
    Distribution,
    PromptJitter,
}

impl From<Axis> for AblationAxis {
    fn from(a: Axis) -> Self {
        match a {
            Axis::Module => AblationAxis::Module,
            Axis::Position => AblationAxis::Position,
            Axis::Distribution => AblationAxis::Distribution,
            Axis::PromptJitter => AblationAxis::PromptJitter,
        }
    }
}

impl Common {
    fn resolve(&self) -> sdgseg::Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(path) => PipelineConfig::load(path)?,
            None => PipelineConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(s) = self.sufm {
            cfg.agm.sufm = matches!(s, Switch::On);
        }
        if let Some(s) = self.ipef {
            cfg.segmenter.model.ipef.enabled = matches!(s, Switch::On);
        }
        cfg.prompts.use_gt_boxes |= self.use_gt_boxes;
        if let Some(j) = &self.jitter {
            cfg.prompts.jitter = Some(JitterSpec { scale: j[0], shift_fraction: j[1] });
        }
        if let Some(dir) = &self.output {
            cfg.output.dir = dir.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn show(path: &Path) -> String {
    path.display().to_string()
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::SynthData(common) => {
            let cfg = common.resolve()?;
            let manifest = cmd_synth_data(&cfg).context("writing the synthetic dataset")?;
            println!("wrote {}", show(&manifest));
        }
        Command::TrainAgm(common) => {
            let cfg = common.resolve()?;
            let report = cmd_train_agm::<f32>(&cfg)?;
            println!("checkpoint {}", show(&report.checkpoint));
            if let Some(loss) = report.final_loss {
                println!("final L_sup {loss:.4}");
            }
            match report.source_test_dice {
                Some(d) => println!("source-test Dice {d:.4}"),
                None => println!("source-test Dice n/a (empty test split)"),
            }
        }
        Command::GenPrompts { common, checkpoint, domains } => {
            let cfg = common.resolve()?;
            for r in cmd_gen_prompts::<f32>(&cfg, checkpoint.as_deref(), &domains)? {
                let quality = r.mean_quality.map(|q| format!("{q:.4}")).unwrap_or_else(|| "n/a".into());
                println!(
                    "{}: {} prompts, {} full-image fallbacks, mean box IoU {quality} -> {}",
                    r.domain,
                    r.records,
                    r.fallbacks,
                    show(&r.path)
                );
            }
        }
        Command::Finetune { common, prompts } => {
            let cfg = common.resolve()?;
            let report = cmd_finetune::<f32>(&cfg, prompts.as_deref())?;
            println!("checkpoint {}", show(&report.checkpoint));
            if let Some(loss) = report.final_loss {
                println!("final L_seg {loss:.4}");
            }
        }
        Command::Eval { common, checkpoint, domains } => {
            let cfg = common.resolve()?;
            let (path, table) = cmd_eval::<f32>(&cfg, checkpoint.as_deref(), &domains)?;
            for r in &table.rows {
                println!("{:<16} {:>4} images  Dice {:.4}", r.domain, r.images, r.dice);
            }
            if let Some(avg) = table.target_average() {
                println!("{:<16} {:>4}         Dice {avg:.4}", "target average", "");
            }
            println!("wrote {}", show(&path));
        }
        Command::Ablate { common, axis } => {
            let cfg = common.resolve()?;
            let (path, table) = cmd_ablate::<f32>(&cfg, axis.into())?;
            println!("{}", table.header.join(" | "));
            for (label, values) in &table.rows {
                let cells: Vec<String> = values.iter().map(|v| format!("{v:.4}")).collect();
                println!("{label} | {}", cells.join(" | "));
            }
            println!("wrote {}", show(&path));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let user = err.chain().any(|e| e.downcast_ref::<sdgseg::Error>().is_some_and(sdgseg::Error::is_user_error));
            ExitCode::from(if user { 2 } else { 1 })
        }
    }
}
