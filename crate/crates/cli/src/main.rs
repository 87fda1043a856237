use std::process::ExitCode;

fn main() -> ExitCode {
    polite_teacher_cli::main_with(std::env::args_os())
}
