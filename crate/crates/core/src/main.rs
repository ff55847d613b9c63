use clap::Parser;

use momentdag::cli::{run, Cli};

fn main() {
    std::process::exit(run(Cli::parse()));
}
