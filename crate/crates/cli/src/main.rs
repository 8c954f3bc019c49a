//! `bdc`: collect demonstrations, train and evaluate policies, run ablation
//! grids and inspect attention masks.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use bdc_core::ablate::{export_metrics, run_suite, AblateOptions, Suite, RUNS_DIR_ENV};
use bdc_core::eval::{evaluate, measure_inference_time, DiffusionPolicy};
use bdc_core::model::{build_attention_mask, load_checkpoint, render_mask, AttentionMaskSpec, AttentionMode, MaskGranularity};
use bdc_core::train::{collect_demos, train, Dataset, TrainConfig};
use bdc_sim::{reset, render, TaskId};
use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "bdc", version, about = "Bimanual diffusion policy with joint video-latent denoising")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Record scripted-expert demonstrations.
    Collect {
        #[arg(long)]
        task: TaskId,
        #[arg(long, default_value_t = 60)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a policy; outputs land in `out_dir`.
    Train(ConfigArgs),
    /// Roll out a checkpoint and write an evaluation report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        task: TaskId,
        #[arg(long, default_value_t = 50)]
        episodes: usize,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long, default_value_t = 10)]
        inference_steps: usize,
        /// Denoise latent tokens at inference even when not required.
        #[arg(long)]
        co_denoise: bool,
        /// Also time this many inference calls with and without latents.
        #[arg(long)]
        timing_trials: Option<usize>,
        /// Report path; a CSV and the resolved settings are written beside it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run (or resume) one ablation grid.
    Ablate {
        #[arg(long)]
        suite: Suite,
        #[command(flatten)]
        base: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long, default_value_t = 50)]
        episodes: usize,
        #[arg(long, env = RUNS_DIR_ENV, default_value = "runs")]
        runs_dir: PathBuf,
    },
    /// Print an attention mask as a labeled grid.
    InspectMask {
        #[arg(long)]
        mode: AttentionMode,
        /// Action chunk length.
        #[arg(long)]
        n: usize,
        /// Frame timestamps, e.g. `2,4`.
        #[arg(long, value_delimiter = ',')]
        timestamps: Vec<usize>,
        #[arg(long, default_value_t = 1)]
        tokens_per_frame: usize,
        #[arg(long, default_value_t = MaskGranularity::PerFrame)]
        granularity: MaskGranularity,
    },
    /// Flatten every suite's results into one long-format CSV.
    ExportMetrics {
        #[arg(long, env = RUNS_DIR_ENV, default_value = "runs")]
        runs_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// `key = value` file; later `--set` flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    task: Option<TaskId>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Override one training field, e.g. `--set total_steps=2000`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> anyhow::Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::from_file(p).with_context(|| format!("reading {}", p.display()))?,
            None => TrainConfig::default(),
        };
        if let Some(t) = self.task {
            cfg.task = t;
        }
        if let Some(d) = &self.data_dir {
            cfg.data_dir = d.clone();
        }
        if let Some(d) = &self.out_dir {
            cfg.out_dir = d.clone();
        }
        for kv in &self.overrides {
            let Some((k, v)) = kv.split_once('=') else { bail!("expected KEY=VALUE, got {kv:?}") };
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> anyhow::Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Collect { task, episodes, seed, out } => {
            let m = collect_demos(task, episodes, seed, &out)?;
            println!(
                "collected {} {} episodes in {} attempts ({:.1}% expert success) -> {}",
                m.episodes.len(),
                task,
                m.attempts,
                100.0 * m.success_rate,
                out.display()
            );
        }
        Command::Train(args) => {
            let cfg = args.resolve()?;
            let outcome = train(&cfg)?;
            if let Some(last) = outcome.rows.last() {
                println!(
                    "step {}: action {:.5} video {:.5} total {:.5}",
                    last.step, last.action_loss, last.video_loss, last.total_loss
                );
            }
            println!("checkpoint: {}", outcome.checkpoint.display());
        }
        Command::Eval { checkpoint, task, episodes, seeds, inference_steps, co_denoise, timing_trials, out } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let settings = serde_json::json!({
                "checkpoint": checkpoint,
                "task": task.to_string(),
                "episodes": episodes,
                "seeds": seeds,
                "inference_steps": inference_steps,
                "co_denoise": co_denoise,
                "model": ckpt.model.config(),
            });
            let mut policy = DiffusionPolicy::from_checkpoint(ckpt, inference_steps)?;
            policy.co_denoise = co_denoise;
            let mode = policy.mode_label();
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            write_json(&out.with_extension("resolved.json"), &settings)?;
            let report = evaluate(&mut policy, &task.spec(), episodes, &seeds, &mode, settings)?;
            report.write_json(&out)?;
            report.write_csv(&out.with_extension("csv"))?;
            println!("{task} [{mode}]: {:.1}% ± {:.1}% over {} seeds", report.mean, report.std, seeds.len());
            if let Some(trials) = timing_trials {
                let spec = task.spec();
                let state = reset(&spec, 0);
                let image = render(&state);
                let proprio = state.proprio();
                let mut co = DiffusionPolicy::from_checkpoint(load_checkpoint(&checkpoint)?, inference_steps)?;
                co.co_denoise = true;
                policy.co_denoise = false;
                let timings = measure_inference_time(
                    &[("action_only", &policy), ("co_denoise", &co)],
                    &image,
                    &proprio,
                    trials,
                )?;
                for t in &timings {
                    println!("{}: {} tokens, {:.3} ms/call", t.label, t.decoder_tokens, t.mean_ms);
                }
            }
        }
        Command::Ablate { suite, base, seeds, episodes, runs_dir } => {
            let cfg = base.resolve()?;
            Dataset::load(&cfg.data_dir)
                .with_context(|| format!("no dataset at {}; run `bdc collect` first", cfg.data_dir.display()))?;
            let root = runs_dir.join(suite.name()).join(cfg.task.to_string());
            std::fs::create_dir_all(&root)?;
            std::fs::write(root.join("base.resolved"), cfg.to_text())?;
            let opts = AblateOptions { runs_dir, seeds, eval_episodes: episodes, inference_steps: None };
            let (results, summary) = run_suite(suite, &cfg, &opts)?;
            let reused = results.iter().filter(|r| r.reused).count();
            println!("{suite}/{}: {} cells ({reused} reused)", cfg.task, results.len());
            for s in &summary.settings {
                println!("  {:>20}: {:5.1}% ± {:4.1}%", s.setting, s.mean, s.std);
            }
        }
        Command::InspectMask { mode, n, timestamps, tokens_per_frame, granularity } => {
            let spec = AttentionMaskSpec::new(mode, n, &timestamps, tokens_per_frame, granularity);
            let mask = build_attention_mask(&spec)?;
            print!("{}", render_mask(&spec, &mask));
        }
        Command::ExportMetrics { runs_dir, out } => {
            let rows = export_metrics(&runs_dir, &out)?;
            println!("wrote {rows} rows to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
