use std::process::ExitCode;

fn main() -> ExitCode {
    symreg::cli::run(std::env::args_os())
}
