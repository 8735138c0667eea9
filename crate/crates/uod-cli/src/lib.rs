//! Operator command line for the one-shot landmark detection pipeline.
//!
//! One subcommand per pipeline step: `synth` writes synthetic datasets,
//! `stage1` trains the contrastive matching model, `label` turns its
//! one-shot matches into pseudo labels, `stage2` trains the heatmap
//! detector, `eval` and `viz` report on a trained detector, and `sweep`
//! compares single-domain against universal training across one-shot
//! candidates.
//!
//! Every artifact-producing command writes a `manifest.json` next to its
//! outputs capturing the full effective configuration, seeds, input/output
//! paths, and content hashes of checkpoints, so a run can be reproduced
//! from the manifest alone. Commands never mutate their inputs and refuse
//! non-empty output directories unless `--force` is given.

pub mod commands;
pub mod config;
pub mod font;
pub mod manifest;
pub mod pipeline;

use clap::{Parser, Subcommand};
use uod::error::UodError;

#[derive(Debug, Parser)]
#[command(
    name = "uod",
    version,
    about = "Multi-domain one-shot anatomical landmark detection pipeline"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic landmark datasets with known ground truth.
    Synth(commands::synth::SynthArgs),
    /// Train the self-supervised contrastive matching model (stage I).
    Stage1(commands::stage1::Stage1Args),
    /// Pseudo-label training images by matching against one-shot annotations.
    Label(commands::label::LabelArgs),
    /// Train the supervised heatmap detector on pseudo labels (stage II).
    Stage2(commands::stage2::Stage2Args),
    /// Evaluate a trained detector: MRE and SDR per domain.
    Eval(commands::eval::EvalArgs),
    /// Render prediction-vs-ground-truth overlay images.
    Viz(commands::viz::VizArgs),
    /// Compare one-shot candidates under single-domain vs universal training.
    Sweep(commands::sweep::SweepArgs),
}

/// Process exit code for an error: 2 usage/configuration, 4 numeric failure
/// (NaN abort), 3 everything else (data, validation, checkpoints, IO).
pub fn exit_code(err: &UodError) -> i32 {
    match err {
        UodError::Config(_) => 2,
        UodError::Numeric(_) => 4,
        _ => 3,
    }
}

/// Run one parsed command line; returns the process exit code.
pub fn run(cli: &Cli) -> i32 {
    let result = match &cli.command {
        Command::Synth(args) => commands::synth::run(args).map(|_| ()),
        Command::Stage1(args) => commands::stage1::run(args),
        Command::Label(args) => commands::label::run(args),
        Command::Stage2(args) => commands::stage2::run(args),
        Command::Eval(args) => commands::eval::run(args).map(|_| ()),
        Command::Viz(args) => commands::viz::run(args),
        Command::Sweep(args) => commands::sweep::run(args).map(|_| ()),
    };
    match result {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err}");
            exit_code(&err)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_error_class() {
        assert_eq!(exit_code(&UodError::config("x")), 2);
        assert_eq!(exit_code(&UodError::numeric("x")), 4);
        assert_eq!(exit_code(&UodError::data("x")), 3);
        assert_eq!(exit_code(&UodError::validation("x")), 3);
        assert_eq!(exit_code(&UodError::domain("x")), 3);
        assert_eq!(exit_code(&UodError::shape("x")), 3);
        assert_eq!(exit_code(&UodError::checkpoint("x")), 3);
        let io = UodError::from(std::io::Error::other("x"));
        assert_eq!(exit_code(&io), 3);
    }

    #[test]
    fn cli_parses_every_subcommand() {
        let cases: &[&[&str]] = &[
            &["uod", "synth", "--out", "d"],
            &["uod", "stage1", "--data", "a", "b", "--out", "d"],
            &["uod", "label", "--model", "m", "--data", "a", "--out", "d"],
            &["uod", "stage2", "--data", "a", "--labels", "l", "--out", "d"],
            &["uod", "eval", "--model", "m", "--data", "a"],
            &["uod", "viz", "--model", "m", "--data", "a", "--out", "d"],
            &["uod", "sweep", "--data", "a", "b", "--out", "d", "--candidates", "x,y"],
        ];
        for argv in cases {
            Cli::try_parse_from(argv.iter()).unwrap();
        }
    }

    #[test]
    fn missing_required_flags_are_usage_errors() {
        assert!(Cli::try_parse_from(["uod", "synth"]).is_err());
        assert!(Cli::try_parse_from(["uod", "stage1", "--out", "d"]).is_err());
        assert!(Cli::try_parse_from(["uod", "nonsense"]).is_err());
    }
}
