use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(etkf_sim::main_with_args(std::env::args_os()))
}
