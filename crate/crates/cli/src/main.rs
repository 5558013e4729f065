use clap::Parser;

fn main() {
    let cli = expfbm_cli::Cli::parse();
    std::process::exit(expfbm_cli::run(cli));
}
