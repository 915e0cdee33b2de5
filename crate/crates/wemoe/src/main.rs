use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use wemoe::commands::{self, Run};
use wemoe::config::RunConfig;
use wemoe::Result;

/// Weight-ensembling MoE model merging on desk-scale synthetic tasks.
#[derive(Debug, Parser)]
#[command(name = "wemoe", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Merge method for `merge`.
    #[arg(long, global = true)]
    method: Option<String>,
    /// λ for both static merging and WEMoE router initialization.
    #[arg(long, global = true)]
    lambda: Option<f64>,
    #[arg(long, global = true)]
    ties_keep: Option<f64>,
    /// Upscaling scope: mlp, attn-mlp or block.
    #[arg(long, global = true)]
    scope: Option<String>,
    #[arg(long, global = true)]
    router_depth: Option<usize>,
    /// Test-time adaptation steps.
    #[arg(long, global = true)]
    steps: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory holding every artifact.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the task datasets and the shared pretrained model.
    Pretrain,
    /// Fine-tune one model per task from the pretrained model.
    Finetune,
    /// Merge the fine-tuned models statically or with AdaMerging.
    Merge,
    /// Build the WEMoE model with freshly initialized routers.
    Upscale,
    /// Adapt the routers by entropy minimization on unlabeled test data.
    Tta,
    /// Per-task accuracy of every model present in the run directory.
    Eval,
    /// Parameter counts, similarity, loss landscape and routing reports.
    Analyze,
    /// Print the resolved configuration as TOML.
    Config,
}

impl Cli {
    fn run_config(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(m) = &self.method {
            c.merge.method = m.clone();
        }
        if let Some(l) = self.lambda {
            c.merge.lambda = l;
            c.wemoe.lambda = l;
        }
        if let Some(k) = self.ties_keep {
            c.merge.ties_keep = k;
        }
        if let Some(s) = &self.scope {
            c.wemoe.scope = s.clone();
        }
        if let Some(d) = self.router_depth {
            c.wemoe.router_depth = d;
        }
        if let Some(s) = self.steps {
            c.tta.steps = s;
        }
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(o) = &self.out {
            c.out = o.clone();
        }
        Ok(c)
    }

    fn execute(&self) -> Result<()> {
        let config = self.run_config()?;
        if let Command::Config = self.command {
            config.experiment()?;
            print!("{}", config.to_toml());
            return Ok(());
        }
        let run = Run::new(config)?;
        match self.command {
            Command::Pretrain => commands::cmd_pretrain(&run),
            Command::Finetune => commands::cmd_finetune(&run),
            Command::Merge => {
                let path = commands::cmd_merge(&run, run.config.merge_method()?)?;
                println!("wrote {}", path.display());
                Ok(())
            }
            Command::Upscale => commands::cmd_upscale(&run),
            Command::Tta => commands::cmd_tta(&run),
            Command::Eval => {
                for row in commands::cmd_eval(&run)? {
                    let accs: Vec<String> = row.accuracy.iter().map(|a| format!("{:.4}", a)).collect();
                    println!("{:<18} {}  avg {:.4}", row.method, accs.join(" "), row.average());
                }
                Ok(())
            }
            Command::Analyze => commands::cmd_analyze(&run),
            Command::Config => unreachable!(),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.execute() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
