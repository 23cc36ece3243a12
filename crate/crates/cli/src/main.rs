use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use capvid_cli::commands::{
    cmd_ablate, cmd_dump_attn, cmd_edit, cmd_generate_data, cmd_metrics, cmd_train, exit_code, AblateArgs, Common,
    DumpAttnArgs, EditArgs, MetricsArgs,
};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "capvid", version, about = "Subject-driven editing of toy videos")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the run, corpus and training seeds.
    #[arg(long)]
    seed: Option<u64>,
    /// Output location.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replace existing output.
    #[arg(long)]
    force: bool,
}

impl From<CommonArgs> for Common {
    fn from(a: CommonArgs) -> Self {
        Common {
            config: a.config,
            seed: a.seed,
            out: a.out,
            force: a.force,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic corpus.
    GenerateData(CommonArgs),
    /// Train the denoiser and attribute head on the corpus.
    Train(CommonArgs),
    /// Edit one clip.
    Edit {
        #[command(flatten)]
        common: CommonArgs,
        /// Directory of frame_NNNN.png files with a manifest.json.
        #[arg(long)]
        video: PathBuf,
        /// Defaults to the clip caption.
        #[arg(long)]
        source_prompt: Option<String>,
        #[arg(long)]
        edit_prompt: String,
        #[arg(long)]
        reference_image: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Save cross-attention every N ladder steps (0 disables).
        #[arg(long, default_value_t = 10)]
        attn_every: usize,
    },
    /// Run the ablation suite and print the ordering checks.
    Ablate {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, default_value_t = 20)]
        cases: usize,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score an edited clip against its source.
    Metrics {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        edited: PathBuf,
        #[arg(long)]
        caption: Option<String>,
        #[arg(long)]
        masks: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Render a saved cross-attention map as heatmaps.
    DumpAttn {
        /// Output directory of an `edit` run.
        #[arg(long)]
        result: PathBuf,
        #[arg(long)]
        t: usize,
        #[arg(long, default_value_t = 0)]
        layer: usize,
        #[arg(long, default_value_t = 0)]
        frame: usize,
        #[arg(long, default_value = "edit", value_parser = ["edit", "source"])]
        branch: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenerateData(c) => {
            let dir = cmd_generate_data(&c.into())?;
            println!("{}", dir.display());
        }
        Command::Train(c) => {
            let path = cmd_train(&c.into())?;
            println!("{}", path.display());
        }
        Command::Edit {
            common,
            video,
            source_prompt,
            edit_prompt,
            reference_image,
            checkpoint,
            attn_every,
        } => {
            let out = cmd_edit(&EditArgs {
                common: common.into(),
                video,
                source_prompt,
                edit_prompt,
                reference_image,
                checkpoint,
                attn_every,
            })?;
            println!("{}", out.display());
        }
        Command::Ablate {
            common,
            cases,
            checkpoint,
        } => {
            let (_, checks) = cmd_ablate(&AblateArgs {
                common: common.into(),
                cases,
                checkpoint,
            })?;
            if checks.iter().any(|c| !c.passed) {
                anyhow::bail!("ablation ordering checks failed");
            }
        }
        Command::Metrics {
            common,
            source,
            edited,
            caption,
            masks,
            checkpoint,
        } => {
            let report = cmd_metrics(&MetricsArgs {
                common: common.into(),
                source,
                edited,
                caption,
                masks,
                checkpoint,
            })?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::DumpAttn {
            result,
            t,
            layer,
            frame,
            branch,
            out,
        } => {
            let path = cmd_dump_attn(&DumpAttnArgs {
                result_dir: result,
                t,
                layer,
                frame,
                branch,
                out,
            })?;
            println!("{}", path.display());
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
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
