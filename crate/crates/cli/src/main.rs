//! `lift3d`: synthetic scenes to 3D features, location tokens, language data
//! and evaluation, one subcommand per stage.

mod commands;
mod config;
mod error;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "lift3d", version, about = "Synthetic 3D scene pipelines")]
pub struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Direct,
    Fuse,
    Field,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Pipeline {
    Box,
    Chat,
    Revise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PolicyKind {
    Oracle,
    Frontier,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a seeded scene and write it as JSON.
    Scene {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        n_objects: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render orbit views of a scene into a directory of tensor files.
    Render {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        views: Option<usize>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Build 3D features from rendered views.
    Extract {
        #[arg(long, value_enum)]
        method: Method,
        #[arg(long)]
        views_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Encode a box to location tokens, or decode token text back to a box.
    Tokenize {
        /// JSON file holding `{"min": [..], "max": [..]}` or a flat 6-array.
        #[arg(long, conflicts_with_all = ["bbox", "decode"])]
        aabb: Option<PathBuf>,
        /// `xmin,ymin,zmin,xmax,ymax,zmax`
        #[arg(long = "box", allow_hyphen_values = true, conflicts_with = "decode")]
        bbox: Option<String>,
        #[arg(long)]
        decode: Option<String>,
        /// Scene JSON whose bounds define the token grid.
        #[arg(long)]
        scene: Option<PathBuf>,
    },
    /// Add position embeddings to a point feature cloud.
    Embed {
        #[arg(long)]
        points: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate language records for a directory of scenes.
    Datagen {
        #[arg(long)]
        scenes_dir: Option<PathBuf>,
        #[arg(long)]
        task: String,
        #[arg(long, value_enum, default_value = "box")]
        pipeline: Pipeline,
        /// Records to revise (revise pipeline only).
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
        /// Seed of the offline mock client.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Append location tokens for every box a record mentions.
        #[arg(long)]
        loc_tokens: bool,
    },
    /// Split records 8:1:1 into train/val/test files.
    Split {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Score predictions and print a metric report.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        task: String,
        /// IoU threshold for grounding accuracy.
        #[arg(long)]
        k: Option<f64>,
        #[arg(long)]
        cider_x10: bool,
    },
    /// Run one navigation episode.
    Nav {
        /// Environment JSON; the bundled maze when absent.
        #[arg(long, conflicts_with = "random")]
        env: Option<PathBuf>,
        #[arg(long, value_enum)]
        policy: PolicyKind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Generate a random maze from the seed instead of loading one.
        #[arg(long)]
        random: bool,
        #[arg(long)]
        max_steps: Option<usize>,
        /// Also write the environment used to this JSON file.
        #[arg(long)]
        write_env: Option<PathBuf>,
    },
    /// Print a tensor file as text.
    Dump {
        #[arg(long)]
        file: PathBuf,
        #[arg(long, default_value_t = 20)]
        rows: usize,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail(&CliError::usage(e.to_string().trim())),
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e),
    }
}

fn fail(e: &CliError) -> ExitCode {
    eprintln!("{}", e.to_json());
    ExitCode::from(e.kind.exit_code() as u8)
}
