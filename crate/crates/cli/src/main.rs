fn main() {
    std::process::exit(confloc_cli::run_command(std::env::args_os()));
}
