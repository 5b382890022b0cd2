use clap::Parser;

fn main() {
    if let Err(e) = stemseg::cli::run(stemseg::cli::Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
