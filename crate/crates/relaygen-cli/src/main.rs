use clap::Parser;
use tracing_subscriber::EnvFilter;

fn main() {
    let cli = relaygen_cli::Cli::parse();
    let filter = EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| EnvFilter::new(cli.log_level.clone()));
    tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .init();

    if let Err(err) = relaygen_cli::execute(&cli) {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}
