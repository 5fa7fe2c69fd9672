use std::process::ExitCode;

fn main() -> ExitCode {
    voxatn_cli::run(std::env::args_os())
}
