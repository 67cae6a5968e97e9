use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(smore_core::cli::run() as u8)
}
