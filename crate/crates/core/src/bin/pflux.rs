use std::io;
use std::process::ExitCode;

fn main() -> ExitCode {
    let code = pflux::harness::cli::run(std::env::args_os(), &mut io::stdout().lock(), &mut io::stderr().lock());
    ExitCode::from(code.clamp(0, 255) as u8)
}
