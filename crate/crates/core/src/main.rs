use clap::Parser;

use censored_additivity::cli::{run, Cli};

fn main() {
    std::process::exit(run(Cli::parse()));
}
