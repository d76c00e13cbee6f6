use clap::Parser;

fn main() {
    let args = geostory::cli::Cli::parse();
    std::process::exit(geostory::cli::run(args));
}
