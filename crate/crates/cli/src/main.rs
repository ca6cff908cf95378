use std::process::ExitCode;

fn main() -> ExitCode {
    match grk_cli::run(std::env::args_os()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("grk: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
