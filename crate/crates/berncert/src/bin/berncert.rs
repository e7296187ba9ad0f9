use std::process::exit;

fn main() {
    if let Err(e) = berncert::cli::run() {
        eprintln!("error: {e}");
        exit(e.exit_code());
    }
}
