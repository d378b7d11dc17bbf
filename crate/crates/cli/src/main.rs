use clap::Parser;

fn main() {
    let cli = hgcn_cli::Cli::parse();
    if let Err(e) = hgcn_cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
