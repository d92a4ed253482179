use std::process::ExitCode;

fn main() -> ExitCode {
    match ulpt::cli::run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(ulpt::cli::exit_code(&err))
        }
    }
}
