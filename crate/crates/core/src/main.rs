use clap::Parser;

use nsc::cli::{init_logging, run_command, Cli, EXIT_CONFIG};

fn main() {
    init_logging();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            std::process::exit(if e.use_stderr() { EXIT_CONFIG } else { 0 });
        }
    };
    std::process::exit(run_command(&cli.command));
}
