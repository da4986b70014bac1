mod commands;
mod render;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::Failure;

#[derive(Debug, Parser)]
#[command(
    name = "motionprior",
    version,
    about = "Simulate MRI motion artefacts and train prior-conditioned correction networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every config-driven subcommand.
#[derive(Debug, Args)]
struct RunArgs {
    /// JSON run configuration. Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the global seed.
    #[arg(long)]
    seed: Option<u64>,
    /// `section.key=value` override, value parsed as JSON. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory. Overrides `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic multi-contrast dataset with a manifest.
    Phantom {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 12)]
        n_subjects: usize,
        /// Volume size as X,Y,Z.
        #[arg(long, default_value = "64,64,16", value_parser = parse_size)]
        size: [usize; 3],
        /// Ellipsoids per phantom, the head included.
        #[arg(long, default_value_t = 40)]
        n_shapes: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Corrupt the target contrast of every subject and write the motion traces.
    Simulate {
        #[command(flatten)]
        run: RunArgs,
        /// Input manifest file or directory. Overrides `data.manifest`.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Train the configured model.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score checkpoints on the test split against the uncorrected input.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        /// Checkpoint as `path` or `label=path`. Repeatable.
        #[arg(long = "checkpoint", value_name = "[LABEL=]PATH")]
        checkpoints: Vec<String>,
        /// Test slice shown in the example panel. Defaults to the slice with median corrupted SSIM.
        #[arg(long)]
        example: Option<usize>,
    },
    /// Re-render the box plot and example panel of an eval directory.
    Plot {
        /// Directory written by `eval`.
        #[arg(long)]
        input: PathBuf,
        /// Defaults to the input directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_size(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    parts.try_into().map_err(|_| "expected X,Y,Z".to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Phantom {
            seed,
            n_subjects,
            size,
            n_shapes,
            out,
        } => commands::phantom(seed, n_subjects, size, n_shapes, &out),
        Command::Simulate { run, input } => commands::simulate(&run, input.as_deref()),
        Command::Train { run, resume } => commands::train(&run, resume.as_deref()),
        Command::Eval {
            run,
            checkpoints,
            example,
        } => commands::eval(&run, &checkpoints, example),
        Command::Plot { input, out } => commands::plot(&input, out.as_deref().unwrap_or(&input)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
