use std::process::ExitCode;

fn main() -> ExitCode {
    hienet::cli::main_with(std::env::args_os())
}
