use clap::Parser;

fn main() {
    let cli = cdcd_cli::Cli::parse();
    if let Err(e) = cdcd_cli::run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
