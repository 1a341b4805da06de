use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(relvar::cli::run(std::env::args_os()))
}
