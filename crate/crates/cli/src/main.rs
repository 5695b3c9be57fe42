use clap::Parser;

fn main() {
    let cli = inpaint_cli::Cli::parse();
    if let Err(e) = inpaint_cli::run(&cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
