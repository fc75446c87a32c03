use clap::Parser;

fn main() {
    let cli = icb_core::cli::Cli::parse();
    std::process::exit(icb_core::cli::run(cli));
}
