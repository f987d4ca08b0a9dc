use clap::Parser;
use mvinpaint_service::cli::{run, Cli};

fn main() {
    mvinpaint_service::logging::init();
    let cli = Cli::parse();
    std::process::exit(run(cli));
}
