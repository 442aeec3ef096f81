use std::process::ExitCode;

fn main() -> ExitCode {
    let matches = ftvsr_cli::cli().get_matches();
    match ftvsr_cli::execute(&matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e);
            ExitCode::FAILURE
        }
    }
}
