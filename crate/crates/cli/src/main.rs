use std::process::ExitCode;

fn main() -> ExitCode {
    mtmm_cli::main_with_args(std::env::args_os())
}
