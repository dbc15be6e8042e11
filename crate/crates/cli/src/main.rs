use clap::Parser;

use gentron_cli::commands::{run, Cli};

fn main() {
    std::process::exit(run(Cli::parse()));
}
