use clap::Parser;
use steeradv_cli::{run, Cli, EXIT_OK};

fn main() {
    let cli = Cli::parse();
    let code = match run(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("steeradv: {e}");
            e.exit_code()
        }
    };
    std::process::exit(code);
}
