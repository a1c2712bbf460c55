use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = cftwin_cli::Cli::parse();
    match cftwin_cli::run(&cli) {
        Ok(manifest) => log::info!("done; manifest at {}", manifest.display()),
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::exit(cftwin_cli::exit_code(&e));
        }
    }
}
