fn main() {
    std::process::exit(synthvox_cli::run_command(std::env::args_os()));
}
