use clap::Parser;

fn main() {
    let cli = hetnoise_cli::Cli::parse();
    if let Err(e) = hetnoise_cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
