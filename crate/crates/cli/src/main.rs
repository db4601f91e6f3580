use std::process::ExitCode;

fn main() -> ExitCode {
    let cwd = match std::env::current_dir() {
        Ok(d) => d,
        Err(e) => {
            eprintln!("polypgen: cannot read the working directory: {e}");
            return ExitCode::from(polypgen_cli::EXIT_USAGE as u8);
        }
    };
    ExitCode::from(polypgen_cli::run(std::env::args_os(), &cwd) as u8)
}
