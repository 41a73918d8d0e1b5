use clap::Parser;

fn main() {
    let cli = layerlab_cli::Cli::parse();
    std::process::exit(layerlab_cli::run(&cli));
}
