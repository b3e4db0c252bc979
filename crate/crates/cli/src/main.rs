use clap::Parser;
use tta_cli::{run, Cli, OUT_ROOT_ENV};

fn main() {
    let cli = Cli::parse();
    let env_root = std::env::var_os(OUT_ROOT_ENV).map(Into::into);
    if let Err(e) = run(cli.command, env_root) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
