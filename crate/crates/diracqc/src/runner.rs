//! Batch front end behind the `diracqc` binary.

pub fn cli_main() {
    eprintln!("not wired up yet");
    std::process::exit(2);
}
