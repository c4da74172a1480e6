use clap::Parser;

use genbound::cli::{exit_code, run, Cli};

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("genbound: {e}");
        std::process::exit(exit_code(&e));
    }
}
