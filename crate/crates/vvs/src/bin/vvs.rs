use std::process::ExitCode;

fn main() -> ExitCode {
    vvs::cli::run()
}
