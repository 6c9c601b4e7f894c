use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = abr_lab::Cli::parse();
    if let Err(e) = abr_lab::run(&cli) {
        eprintln!("abrlab: {e}");
        std::process::exit(e.exit_code());
    }
}
