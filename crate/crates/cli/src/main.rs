use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use dreamview_cli::commands;
use dreamview_cli::config::resolve_with_file;
use serde_json::{json, Map, Value};

#[derive(Parser)]
#[command(name = "dreamview", version, about = "Multi-view customizable generation with adaptive guidance injection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat key=value or JSON config file (a run's sidecar.json also works).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Args)]
struct Prompts {
    #[arg(long)]
    overall: Option<String>,
    #[arg(long)]
    front: Option<String>,
    #[arg(long)]
    right: Option<String>,
    #[arg(long)]
    back: Option<String>,
    #[arg(long)]
    left: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    policy: Option<String>,
    #[arg(long, allow_negative_numbers = true)]
    margin: Option<f64>,
    /// Held-out prompt sets.
    #[arg(long)]
    scenes: Option<usize>,
    /// Sampling seeds per prompt set.
    #[arg(long)]
    seeds: Option<usize>,
    #[arg(long)]
    prompt_seed: Option<u64>,
    /// `full` or `stripped`.
    #[arg(long)]
    prompt_mode: Option<String>,
    /// DDIM steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Prompt sets sampled together.
    #[arg(long)]
    batch: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Render the procedural multi-view dataset.
    Dataset {
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train the multi-view denoiser.
    Train2d {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        checkpoint_every: Option<u64>,
        /// Continue from the checkpoint in --out if present.
        #[arg(long)]
        resume: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Sample one 4-view set.
    Sample2d {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        prompts: Prompts,
        #[arg(long)]
        policy: Option<String>,
        #[arg(long, allow_negative_numbers = true)]
        margin: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        cfg_scale: Option<f64>,
        #[arg(long)]
        cfg_rescale: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Distil the trained model into a voxel field.
    Lift3d {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        prompts: Prompts,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long, allow_negative_numbers = true)]
        margin: Option<f64>,
        #[arg(long)]
        views: Option<usize>,
        #[arg(long)]
        grid: Option<usize>,
        #[arg(long)]
        negative_prompt: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Score a policy on held-out prompt sets.
    Eval {
        #[command(flatten)]
        args: EvalArgs,
        /// Also write every generated view.
        #[arg(long)]
        save_images: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate the adaptive policy across margins.
    Sweep {
        #[command(flatten)]
        args: EvalArgs,
        /// Comma-separated, strictly increasing.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        margins: Option<Vec<f64>>,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Default)]
struct Overrides(Map<String, Value>);

impl Overrides {
    fn set<T: serde::Serialize>(&mut self, key: &str, value: Option<T>) -> &mut Self {
        if let Some(v) = value {
            self.0.insert(key.to_string(), json!(v));
        }
        self
    }

    fn prompts(&mut self, p: Prompts) -> &mut Self {
        self.set("overall", p.overall).set("front", p.front).set("right", p.right).set("back", p.back).set("left", p.left)
    }

    fn eval(&mut self, a: &EvalArgs, scenes_key: &str, seeds_key: &str) -> &mut Self {
        self.set("policy", a.policy.clone())
            .set("margin", a.margin)
            .set(scenes_key, a.scenes)
            .set(seeds_key, a.seeds)
            .set("prompt_seed", a.prompt_seed)
            .set("prompt_mode", a.prompt_mode.clone())
            .set("sample_steps", a.steps)
            .set("eval_batch", a.batch)
    }
}

fn progress(step: u64, loss: f64) {
    if step % 100 == 0 {
        eprintln!("step {step} loss {loss:.5}");
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut o = Overrides::default();
    match cli.command {
        Command::Dataset { n, out, common } => {
            o.set("scenes", n).set("seed", common.seed);
            let config = resolve_with_file(common.config.as_deref(), o.0)?;
            commands::dataset(&config, &out)
        }
        Command::Train2d { data, out, steps, lr, checkpoint_every, resume, common } => {
            o.set("train_steps", steps).set("lr", lr).set("checkpoint_every", checkpoint_every).set("seed", common.seed);
            let config = resolve_with_file(common.config.as_deref(), o.0)?;
            commands::train2d(&config, &data, &out, resume, progress)
        }
        Command::Sample2d { ckpt, out, prompts, policy, margin, steps, cfg_scale, cfg_rescale, common } => {
            o.prompts(prompts)
                .set("policy", policy)
                .set("margin", margin)
                .set("sample_steps", steps)
                .set("cfg_scale", cfg_scale)
                .set("cfg_rescale", cfg_rescale)
                .set("seed", common.seed);
            let config = resolve_with_file(common.config.as_deref(), o.0)?;
            for path in commands::sample2d(&config, &ckpt, &out)? {
                println!("{}", path.display());
            }
            Ok(())
        }
        Command::Lift3d { ckpt, out, prompts, steps, margin, views, grid, negative_prompt, common } => {
            o.prompts(prompts)
                .set("lift_steps", steps)
                .set("lift_margin", margin)
                .set("lift_views", views)
                .set("grid", grid)
                .set("negative_prompt", negative_prompt)
                .set("seed", common.seed);
            let config = resolve_with_file(common.config.as_deref(), o.0)?;
            commands::lift3d(&config, &ckpt, &out, progress)
        }
        Command::Eval { args, save_images, common } => {
            o.eval(&args, "eval_scenes", "eval_seeds").set("seed", common.seed);
            let config = resolve_with_file(common.config.as_deref(), o.0)?;
            let report = commands::eval(&config, &args.ckpt, &args.out, save_images)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(())
        }
        Command::Sweep { args, margins, common } => {
            o.eval(&args, "sweep_scenes", "sweep_seeds").set("sweep_margins", margins).set("seed", common.seed);
            let config = resolve_with_file(common.config.as_deref(), o.0)?;
            let result = commands::sweep(&config, &args.ckpt, &args.out, |r| {
                eprintln!("margin {:?}: alignment {:.3} consistency {:.3}", r.margin, r.view_alignment, r.overall_consistency)
            })?;
            print!("{}", result.to_csv());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
