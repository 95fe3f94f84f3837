//! `cca`: build concepts, generate synthetic data, train, precompute a
//! gallery, and answer, evaluate or benchmark queries. Reports go to stdout
//! as JSON; diagnostics go to stderr.

mod commands;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use cca_core::CcaError;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "cca", version, about = "Commonsense-aware video temporal grounding")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Select concepts from annotations and build their relation graph.
    BuildConcepts {
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long, default_value_t = 3)]
        min_freq: usize,
        /// Word vectors, one `token v1 v2 ...` line each.
        #[arg(long)]
        embeddings: PathBuf,
        /// Stop-word list, one per line; the bundled list by default.
        #[arg(long)]
        stopwords: Option<PathBuf>,
        /// Extra concepts, one per line, added as unseen nodes.
        #[arg(long)]
        extra_concepts: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a seeded synthetic dataset.
    Synth {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
        /// Generator settings as JSON; `--seed` overrides its seed.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        n_train: Option<usize>,
        #[arg(long)]
        n_eval: Option<usize>,
    },
    /// Train a model and write its archive.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_model: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        /// Directory of `<video_id>.ten` clip features.
        #[arg(long)]
        features: PathBuf,
        /// Vocabulary directory from `build-concepts`.
        #[arg(long)]
        vocab: PathBuf,
    },
    /// Precompute proposal projections for every annotated video.
    Gallery {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// Annotations naming the videos and their durations.
        #[arg(long)]
        annotations: PathBuf,
    },
    /// Rank the spans of one video for a sentence.
    Query {
        #[arg(long)]
        gallery: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        sentence: String,
        #[arg(long)]
        video_id: String,
        #[arg(long, default_value_t = 5)]
        top_k: usize,
        #[arg(long, default_value_t = 0.49)]
        nms_threshold: f64,
    },
    /// Recall table for annotated queries.
    Eval {
        #[arg(long)]
        gallery: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long, default_value_t = 0.49)]
        nms_threshold: f64,
    },
    /// Time the query path against the no-gallery counterfactual.
    Bench {
        #[arg(long)]
        gallery: PathBuf,
        /// Annotation-format file; only `video_id` and `sentence` are used.
        #[arg(long)]
        queries: PathBuf,
        #[arg(long, default_value_t = 20)]
        reps: usize,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// Clip features for the counterfactual path.
        #[arg(long)]
        features: PathBuf,
        #[arg(long, default_value_t = 0.49)]
        nms_threshold: f64,
    },
}

fn exit_code(err: &CcaError) -> u8 {
    match err {
        CcaError::Numeric(_) | CcaError::Tape(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(cli.command) {
        Ok(report) => {
            let text = serde_json::to_string_pretty(&report).expect("reports serialize");
            // a closed pipe (e.g. `| head`) is not an error
            let _ = writeln!(std::io::stdout().lock(), "{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
