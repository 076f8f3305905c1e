use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use deskrlhf_cli::bench::{run_bench, write_bench, BenchConfig};
use deskrlhf_cli::chat::{repl, Chat, ChatOptions};
use deskrlhf_cli::config::{Deployment, RunConfig};
use deskrlhf_cli::perf_cmd::{run_perf, PerfConfig};
use deskrlhf_cli::run::{self, TOKENIZER_FILE};
use deskrlhf_cli::Stage;
use deskrlhf_core::data::tokenizer_from_spec;
use deskrlhf_core::model::{load_checkpoint, Strategy};

#[derive(Parser)]
#[command(name = "deskrlhf", version, about = "Three-stage RLHF on toy models")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args)]
struct RunArgs {
    /// JSON run configuration.
    #[arg(long, short)]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// single_gpu, single_node or multi_node.
    #[arg(long)]
    deployment: Option<String>,
    #[arg(long)]
    actor_model: Option<String>,
    #[arg(long)]
    reward_model: Option<String>,
}

impl RunArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(d) = &self.deployment {
            cfg.deployment = Deployment::parse(d)?;
        }
        if let Some(a) = &self.actor_model {
            cfg.actor = a.clone();
        }
        if let Some(r) = &self.reward_model {
            cfg.reward = r.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// SFT, reward model and PPO in one run.
    Train(RunArgs),
    /// Supervised fine-tuning only.
    Sft(RunArgs),
    /// Reward model only; starts from the run's SFT checkpoint when present.
    Rm {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        sft: Option<PathBuf>,
    },
    /// PPO only, from SFT and reward checkpoints.
    Ppo {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        sft: Option<PathBuf>,
        #[arg(long)]
        rm: Option<PathBuf>,
    },
    /// Interactive chat with an LM checkpoint.
    Chat {
        checkpoint: PathBuf,
        /// Tokenizer spec; defaults to the run's tokenizer file, else bytes.
        #[arg(long)]
        tokenizer: Option<String>,
        #[arg(long, conflicts_with = "top_k")]
        greedy: bool,
        #[arg(long, default_value_t = 50)]
        top_k: usize,
        #[arg(long, default_value_t = 1.0)]
        temperature: f32,
        #[arg(long, default_value_t = 32)]
        max_new: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Analytic time and cost estimates at cluster scale.
    Perf {
        /// JSON file with the same fields as the flags.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "opt-13b")]
        model: String,
        #[arg(long, default_value = "opt-350m")]
        critic: String,
        #[arg(long, default_value = "a100-80g")]
        gpu: String,
        /// Comma-separated GPU counts.
        #[arg(long, value_delimiter = ',', default_value = "8")]
        gpus: Vec<usize>,
        #[arg(long, default_value_t = 1)]
        tp: usize,
        #[arg(long)]
        offload: bool,
        /// Trainable fraction under LoRA.
        #[arg(long)]
        lora: Option<f64>,
        #[arg(long)]
        mfu: Option<f64>,
        #[arg(long)]
        gen_efficiency: Option<f64>,
        #[arg(long)]
        price: Option<f64>,
        #[arg(long, env = "DESKRLHF_OUTPUT_DIR", default_value = "runs/perf")]
        output_dir: PathBuf,
    },
    /// Measured generation and training throughput of the toy engine.
    Bench {
        #[arg(long, default_value = "tiny")]
        preset: String,
        #[arg(long, default_value_t = 1)]
        world_size: usize,
        #[arg(long, default_value_t = 1)]
        tp: usize,
        #[arg(long, default_value_t = 8)]
        batch: usize,
        #[arg(long, default_value_t = 16)]
        prompt_len: usize,
        #[arg(long, default_value_t = 32)]
        gen_len: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    match real_main() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn real_main() -> Result<()> {
    let cli = Cli::parse();
    let stdout = io::stdout();
    match cli.cmd {
        Cmd::Train(args) => {
            let cfg = args.load()?;
            let report = run::train_all(&cfg)?;
            report.timing.write_table(stdout.lock())?;
            println!("outputs in {}", cfg.output_dir.display());
        }
        Cmd::Sft(args) => {
            let cfg = args.load()?;
            let data = run::load_data(&cfg)?;
            run::prepare_output(&cfg)?;
            run::run_sft(&cfg, &data)?;
        }
        Cmd::Rm { run: args, sft } => {
            let cfg = args.load()?;
            let data = run::load_data(&cfg)?;
            run::prepare_output(&cfg)?;
            let default = cfg.output_dir.join(run::SFT_CKPT);
            let init = match (&sft, default.is_file()) {
                (Some(p), _) => Some(run::load_stage(&cfg, Stage::Rm, run::SFT_CKPT, Some(p))?),
                (None, true) => Some(run::load_stage(&cfg, Stage::Rm, run::SFT_CKPT, None)?),
                (None, false) => None,
            };
            run::run_rm(&cfg, &data, init.as_ref())?;
        }
        Cmd::Ppo { run: args, sft, rm } => {
            let cfg = args.load()?;
            let data = run::load_data(&cfg)?;
            let s = run::load_stage(&cfg, Stage::Ppo, run::SFT_CKPT, sft.as_deref())?;
            let r = run::load_stage(&cfg, Stage::Ppo, run::RM_CKPT, rm.as_deref())?;
            run::prepare_output(&cfg)?;
            run::run_ppo(&cfg, &data, &s, &r)?;
        }
        Cmd::Chat {
            checkpoint,
            tokenizer,
            greedy,
            top_k,
            temperature,
            max_new,
            seed,
        } => {
            let model = load_checkpoint(&checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
            let spec = match tokenizer {
                Some(s) => s,
                None => {
                    let sibling = checkpoint.with_file_name(TOKENIZER_FILE);
                    std::fs::read_to_string(sibling).unwrap_or_else(|_| "byte".into())
                }
            };
            let tok = tokenizer_from_spec(spec.trim())?;
            let strategy = if greedy {
                Strategy::Greedy
            } else {
                Strategy::TopK { k: top_k, temperature, seed }
            };
            let mut chat = Chat::new(&model, tok.as_ref(), ChatOptions { strategy, max_new })?;
            let mut out = stdout.lock();
            writeln!(out, "Type a message; :reset clears the conversation, :quit exits.")?;
            repl(&mut chat, io::stdin().lock(), &mut out)?;
        }
        Cmd::Perf {
            config,
            model,
            critic,
            gpu,
            gpus,
            tp,
            offload,
            lora,
            mfu,
            gen_efficiency,
            price,
            output_dir,
        } => {
            let cfg = match config {
                Some(p) => {
                    let text = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
                    serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
                }
                None => PerfConfig {
                    model,
                    critic,
                    gpu,
                    gpus,
                    tp,
                    offload,
                    lora,
                    mfu,
                    gen_efficiency,
                    price,
                    output_dir,
                },
            };
            run_perf(&cfg, stdout.lock())?;
        }
        Cmd::Bench {
            preset,
            world_size,
            tp,
            batch,
            prompt_len,
            gen_len,
            seed,
            csv,
        } => {
            if prompt_len == 0 {
                bail!("prompt_len must be at least 1");
            }
            let rows = run_bench(&BenchConfig {
                preset,
                world_size,
                tp,
                batch,
                prompt_len,
                gen_len,
                seed,
            })?;
            write_bench(&rows, stdout.lock(), csv.as_deref())?;
        }
    }
    Ok(())
}

