use clap::Parser;

fn main() {
    let cli = ddro_lab::cli::Cli::parse();
    std::process::exit(ddro_lab::cli::run(cli));
}
