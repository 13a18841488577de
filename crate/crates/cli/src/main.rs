use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(hepadet_cli::run(std::env::args_os()))
}
