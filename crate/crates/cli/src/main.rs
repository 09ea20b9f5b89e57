use clap::Parser;

fn main() {
    let env = env_logger::Env::new().filter_or("PHRED_LOG_LEVEL", "info");
    env_logger::Builder::from_env(env).format_timestamp_secs().init();
    let cli = phredgan_cli::Cli::parse();
    if let Err(e) = phredgan_cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
