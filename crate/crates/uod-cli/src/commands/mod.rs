//! One module per subcommand. Each exposes a clap `Args` struct and a
//! `run` function; `run` returns the command's primary product where one
//! exists so integration code can drive commands in-process.

pub mod eval;
pub mod label;
pub mod stage1;
pub mod stage2;
pub mod sweep;
pub mod synth;
pub mod viz;
