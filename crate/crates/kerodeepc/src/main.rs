use clap::Parser;

fn main() {
    let cli = kerodeepc::cli::Cli::parse();
    std::process::exit(kerodeepc::cli::execute(cli));
}
