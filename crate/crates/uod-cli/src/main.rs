use clap::Parser;

fn main() {
    let cli = uod_cli::Cli::parse();
    std::process::exit(uod_cli::run(&cli));
}
