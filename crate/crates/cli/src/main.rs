use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = camo_cli::Cli::parse();
    match camo_cli::run(&cli) {
        Ok(out) => {
            println!("{}", out.run_dir.display());
            if out.success {
                ExitCode::SUCCESS
            } else {
                eprintln!("no adversarial example found");
                ExitCode::from(2)
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
