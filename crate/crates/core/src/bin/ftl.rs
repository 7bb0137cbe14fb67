use clap::Parser;
use ftl_core::cli::{self, Cli};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let parsed = Cli::parse();
    if let Err(e) = cli::run(parsed) {
        eprintln!("{}", e.to_json_line());
        std::process::exit(e.exit_code());
    }
}
