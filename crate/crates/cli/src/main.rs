use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(seqwarp_cli::run_from(std::env::args_os()))
}
