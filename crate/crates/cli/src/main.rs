use clap::Parser;

fn main() {
    let cli = syncon_cli::Cli::parse();
    if let Err(e) = syncon_cli::run(cli) {
        eprintln!("{}", e.report_line());
        std::process::exit(e.exit_code());
    }
}
