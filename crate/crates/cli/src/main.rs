use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cht_cli::commands::{self, InferFlags};

/// Canopy-height toolkit: synthetic scenes, training, evaluation, tiled
/// inference and change detection.
#[derive(Parser)]
#[command(name = "cht", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// JSON config file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (default `out/<command>`).
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn out(&self, command: &str) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("out").join(command))
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a synthetic scene into yearly sample archives.
    Synth(Common),
    /// Tile archives into inference windows.
    Preprocess(Common),
    /// Train a U-Net.
    Train(Common),
    /// Score predictions against LiDAR labels.
    Eval(Common),
    /// Predict height maps with the parallel pipeline.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        decoders: Option<usize>,
        #[arg(long)]
        inferrers: Option<usize>,
        /// Window side (px) when tiling archives in memory.
        #[arg(long)]
        window: Option<usize>,
        #[arg(long)]
        margin: Option<usize>,
    },
    /// Smooth yearly maps and report canopy loss.
    Postprocess(Common),
    /// Month and band ablation on the synthetic benchmark.
    Ablate(Common),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match &cli.cmd {
        Cmd::Synth(c) => commands::cmd_synth(&c.config, &c.out("synth")),
        Cmd::Preprocess(c) => commands::cmd_preprocess(&c.config, &c.out("preprocess")),
        Cmd::Train(c) => commands::cmd_train(&c.config, &c.out("train")),
        Cmd::Eval(c) => commands::cmd_eval(&c.config, &c.out("eval")),
        Cmd::Infer {
            common,
            decoders,
            inferrers,
            window,
            margin,
        } => commands::cmd_infer(
            &common.config,
            &common.out("infer"),
            InferFlags {
                decoders: *decoders,
                inferrers: *inferrers,
                window: *window,
                margin: *margin,
            },
        ),
        Cmd::Postprocess(c) => commands::cmd_postprocess(&c.config, &c.out("postprocess")),
        Cmd::Ablate(c) => commands::cmd_ablate(&c.config, &c.out("ablate")).map(|(m, _)| m),
    };
    match res {
        Ok(m) => {
            eprintln!("{} done in {:.1} s", m.command, m.wall_secs);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
