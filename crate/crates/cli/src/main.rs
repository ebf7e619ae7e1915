use std::process::ExitCode;

fn main() -> ExitCode {
    berrypick_cli::run(std::env::args_os())
}
