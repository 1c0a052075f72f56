use clap::Parser;

use skipspec_cli::commands::{
    cmd_report, cmd_run_stream, cmd_search, cmd_synth, ReportArgs, RunStreamArgs, SearchArgs,
    SynthArgs,
};
use skipspec_cli::RunError;

/// Self-speculative decoding with routed skip masks, end to end: corpus
/// synthesis, mask search, router fitting, stream replay, reporting.
#[derive(Parser)]
#[command(name = "skipspec", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Subcommand)]
enum Command {
    /// Write a planted model spec plus per-domain prompt corpora.
    Synth(SynthArgs),
    /// Fit the router and search one skip mask per domain.
    Search(SearchArgs),
    /// Decode a mixed-domain stream under one serving mode.
    RunStream(RunStreamArgs),
    /// Merge run outputs into summary tables and a 2D projection.
    Report(ReportArgs),
}

fn main() {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Search(args) => cmd_search(args),
        Command::RunStream(args) => cmd_run_stream(args),
        Command::Report(args) => cmd_report(args),
    };
    if let Err(err) = result {
        eprintln!("error: {err}");
        let code = match err {
            RunError::LosslessViolation { .. } => 3,
            _ => 2,
        };
        std::process::exit(code);
    }
}
