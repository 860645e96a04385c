use clap::Parser;
use edge_cli::Cli;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = edge_cli::run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
